"""Audio-visual affect regression: convolutional autoencoders for face
frames and raw audio, latent fusion, an LSTM over short windows, and a
concordance-based objective, on a from-scratch autodiff core."""

from .data import Recording, generate_recording, make_benchmark
from .losses import ccc, loss_rec
from .metrics import EvalReport, evaluate, rmse, rmse_joint
from .model import AffectModel, ModelConfig
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AffectModel",
    "EvalReport",
    "ModelConfig",
    "Recording",
    "TrainConfig",
    "ccc",
    "evaluate",
    "generate_recording",
    "load_checkpoint",
    "loss_rec",
    "make_benchmark",
    "rmse",
    "rmse_joint",
    "save_checkpoint",
    "train",
]
