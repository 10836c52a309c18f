"""Named model variants trained and scored on the synthetic benchmark, and
the linear-probe reference they are compared against."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import FrameTable, Recording, make_benchmark, summary_features
from .metrics import EvalReport, evaluate_model, report_from_predictions
from .model import ModelConfig
from .train import TrainConfig, train

HIDDEN_SIZES = (32, 64, 128, 256, 512)

ABLATIONS: dict[str, dict] = {
    "full": {},
    "visual-only": {"modalities": "visual"},
    "audio-only": {"modalities": "audio"},
    "no-autoencoder": {"autoencoder": False},
    **{f"hidden-{h}": {"lstm_hidden": h} for h in HIDDEN_SIZES},
}


class UnknownAblationError(KeyError):
    pass


def ablation_config(name: str, base: TrainConfig | None = None) -> TrainConfig:
    if name not in ABLATIONS:
        raise UnknownAblationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return dataclasses.replace(base or TrainConfig(), **ABLATIONS[name])


def run_ablation(
    name: str,
    config: TrainConfig | None = None,
    benchmark: tuple[Sequence[Recording], Sequence[Recording]] | None = None,
    out_dir=None,
    model_config: ModelConfig | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> EvalReport:
    """Train variant ``name`` and score it on the validation recordings.

    Every variant sees the same benchmark data; ``config.seed`` drives
    initialisation and batch order.
    """
    cfg = ablation_config(name, config)
    train_set, val_set = benchmark if benchmark is not None else make_benchmark()
    out = None if out_dir is None else Path(out_dir) / name
    result = train(cfg, train_set, None, out_dir=out, model_config=model_config, on_step=on_step)
    return evaluate_model(result.model, FrameTable.build(val_set, cfg.k))


def fit_linear_probe(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares weights (with intercept) mapping features to targets."""
    x = np.column_stack([features, np.ones(len(features))])
    coef, *_ = np.linalg.lstsq(x, targets, rcond=None)
    return coef


def apply_linear_probe(coef: np.ndarray, features: np.ndarray) -> np.ndarray:
    return np.column_stack([features, np.ones(len(features))]) @ coef


def linear_probe_report(
    train_set: Sequence[Recording],
    val_set: Sequence[Recording],
    features: Callable = summary_features,
    k: int = 4,
) -> EvalReport:
    """Score a linear map from per-frame summary features of each window's
    last frame to (arousal, valence)."""
    tr = FrameTable.build(train_set, k)
    va = FrameTable.build(val_set, k)
    last_tr = tr.windows[:, -1]
    last_va = va.windows[:, -1]
    coef = fit_linear_probe(features(tr.images, tr.audio)[last_tr], tr.labels[last_tr].astype(np.float64))
    pred = apply_linear_probe(coef, features(va.images, va.audio)[last_va])
    return report_from_predictions(pred, va.labels[last_va], "linear-probe")
