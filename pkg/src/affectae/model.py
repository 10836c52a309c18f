"""Audio-visual auto-encoder + LSTM regressor for arousal/valence.

Two auto-encoders run per frame: a residual 2-D convolutional one over the
face crop and a 1-D convolutional one over the matching 640-sample audio
frame. Their latent codes are concatenated (image first) and a stacked LSTM
reads ``k + 1`` consecutive fused vectors to predict the two affect scores at
the last step through a linear head.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import ConvSpec, LstmLayerParams
from .tensor import Tensor

MODALITIES = ("both", "visual", "audio")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    image_channels: int = 3
    # each residual block: (1x1 channels, 3x3 stride-2 channels, 1x1 channels)
    enc2d_blocks: tuple = ((8, 8, 16), (16, 16, 32))
    latent2d: int = 2048
    dec2d_blocks: tuple = ((16, 16, 16), (8, 8, 3))
    audio_length: int = 640
    # (kernel, out channels) per conv layer, each followed by a max-pool
    conv1d_layers: tuple = ((20, 40), (40, 40))
    pools: tuple = (2, 10)
    bottleneck1d: int = 640
    deconv1d_layers: tuple = ((20, 40), (40, 1))
    upsample: int = 2
    lstm_hidden: int = 512
    lstm_layers: int = 2
    k: int = 4
    modalities: str = "both"
    autoencoder: bool = True
    feedback_predictions: bool = False
    leaky_slope: float = L.LEAKY_SLOPE

    def __post_init__(self):
        if self.modalities not in MODALITIES:
            raise ValueError(f"modalities must be one of {MODALITIES}, got {self.modalities!r}")
        if self.lstm_hidden < 1 or self.lstm_layers < 1 or self.k < 0:
            raise ValueError("lstm sizes must be positive and k non-negative")
        if self.image_size % (2 ** len(self.enc2d_blocks)):
            raise ValueError("image size must be divisible by the encoder downsampling")
        if self.audio_length % int(np.prod(self.pools)):
            raise ValueError("audio length must be divisible by the pooling product")
        if self.latent1d % self.decoder1d_length:
            raise ValueError("audio latent does not reshape onto the decoder length")

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        """Miniature geometry (4x4 images, 16-sample audio) for gradient checks."""
        base = dict(
            image_size=4,
            enc2d_blocks=((2, 2, 3), (3, 3, 4)),
            latent2d=5,
            dec2d_blocks=((3, 3, 3), (2, 2, 3)),
            audio_length=16,
            conv1d_layers=((3, 3), (3, 4)),
            pools=(2, 4),
            bottleneck1d=4,
            deconv1d_layers=((3, 3), (3, 1)),
            upsample=2,
            lstm_hidden=3,
            lstm_layers=2,
            k=2,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def use_visual(self) -> bool:
        return self.modalities in ("both", "visual")

    @property
    def use_audio(self) -> bool:
        return self.modalities in ("both", "audio")

    @property
    def encoded_grid(self) -> int:
        return self.image_size // 2 ** len(self.enc2d_blocks)

    @property
    def flat2d(self) -> int:
        return self.encoded_grid**2 * self.enc2d_blocks[-1][-1]

    @property
    def latent1d(self) -> int:
        return self.audio_length // int(np.prod(self.pools)) * self.conv1d_layers[-1][1]

    @property
    def decoder1d_length(self) -> int:
        return self.audio_length // self.upsample

    @property
    def fused_size(self) -> int:
        return self.latent2d * self.use_visual + self.latent1d * self.use_audio

    @property
    def window(self) -> int:
        return self.k + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        for key, value in d.items():
            if isinstance(value, list):
                d[key] = _tuplify(value)
        return cls(**d)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


@dataclass
class ForwardOutputs:
    latent2d: Tensor | None
    latent1d: Tensor | None
    fused: Tensor
    recon_image: Tensor | None
    recon_audio: Tensor | None
    prediction: Tensor


def _in_model_dtype(fn):
    @functools.wraps(fn)
    def wrapper(self, *args, **kwargs):
        with T.default_dtype(self.dtype):
            return fn(self, *args, **kwargs)

    return wrapper


def _param_group(name: str) -> str:
    return name.split(".", 1)[0]


class AffectModel:
    """Holds the parameters and the forward computation.

    Parameters live in ``self.params`` (insertion-ordered name -> Tensor);
    names are prefixed by their group: ``enc2d``, ``dec2d``, ``enc1d``,
    ``dec1d``, ``lstm`` and ``head``. ``seed=None`` leaves every weight at
    zero, which is enough for shape tracing and skips the sampling cost.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int | None = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self._build(None if seed is None else np.random.default_rng(seed))

    # -- construction ---------------------------------------------------
    def _add(self, prefix: str, spec, rng) -> None:
        for key, t in L.init_params(spec, rng).items():
            t.name = f"{prefix}.{key}"
            self.params[t.name] = t

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        if cfg.use_visual:
            cin = cfg.image_channels
            for j, (c1, c2, c3) in enumerate(cfg.enc2d_blocks):
                self._add(f"enc2d.b{j}.c1", ConvSpec((1, 1), 1, cin, c1), rng)
                self._add(f"enc2d.b{j}.c2", ConvSpec((3, 3), 2, c1, c2), rng)
                self._add(f"enc2d.b{j}.c3", ConvSpec((1, 1), 1, c2, c3), rng)
                self._add(f"enc2d.b{j}.sc", ConvSpec((1, 1), 2, cin, c3), rng)
                cin = c3
            self._add("enc2d.fc", (cfg.latent2d, cfg.flat2d), rng)
            if cfg.autoencoder:
                self._add("dec2d.fc", (cfg.flat2d, cfg.latent2d), rng)
                cin = cfg.enc2d_blocks[-1][-1]
                for j, (c1, c2, c3) in enumerate(cfg.dec2d_blocks):
                    self._add(f"dec2d.b{j}.d1", ConvSpec((1, 1), 1, cin, c1, transposed=True), rng)
                    self._add(f"dec2d.b{j}.d2", ConvSpec((3, 3), 2, c1, c2, transposed=True), rng)
                    self._add(f"dec2d.b{j}.d3", ConvSpec((1, 1), 1, c2, c3, transposed=True), rng)
                    self._add(f"dec2d.b{j}.sc", ConvSpec((1, 1), 1, cin, c3), rng)
                    cin = c3
                if cin != cfg.image_channels:
                    raise ValueError("last decoder block must emit the image channel count")
        if cfg.use_audio:
            cin = 1
            for j, (kern, ch) in enumerate(cfg.conv1d_layers):
                self._add(f"enc1d.c{j}", ConvSpec((kern,), 1, cin, ch), rng)
                cin = ch
            if cfg.autoencoder:
                self._add("dec1d.fc_in", (cfg.bottleneck1d, cfg.latent1d), rng)
                self._add("dec1d.fc_out", (cfg.latent1d, cfg.bottleneck1d), rng)
                cin = cfg.latent1d // cfg.decoder1d_length
                for j, (kern, ch) in enumerate(cfg.deconv1d_layers):
                    self._add(f"dec1d.d{j}", ConvSpec((kern,), 1, cin, ch, transposed=True), rng)
                    cin = ch
                if cin != 1:
                    raise ValueError("last audio decoder layer must emit one channel")
        n_in = cfg.fused_size + (2 if cfg.feedback_predictions else 0)
        for j in range(cfg.lstm_layers):
            self._add(f"lstm.l{j}", ("lstm", n_in, cfg.lstm_hidden), rng)
            n_in = cfg.lstm_hidden
        self._add("head", (2, cfg.lstm_hidden), rng)

    # -- helpers ----------------------------------------------------------
    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype.type

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _lrelu(self, x: Tensor) -> Tensor:
        return L.leaky_relu(x, self.config.leaky_slope)

    def lstm_layer(self, j: int) -> LstmLayerParams:
        pre = f"lstm.l{j}."
        return LstmLayerParams(**{k: self.params[pre + k] for k in ("w_i", "w_f", "w_g", "w_o", "b_i", "b_f", "b_g", "b_o")})

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.params:
            out.setdefault(_param_group(name), []).append(name)
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- visual branch ----------------------------------------------------
    @_in_model_dtype
    def encode2d(self, images) -> Tensor:
        """(N, S, S, C) images in [-1, 1] -> (N, latent2d)."""
        cfg = self.config
        x = T.as_tensor(images)
        expect = (cfg.image_size, cfg.image_size, cfg.image_channels)
        if x.shape[-3:] != expect:
            raise ValueError(f"encode2d expects frames of shape {expect}, got {x.shape}")
        if x.ndim == 3:
            x = x.reshape((1, *x.shape))
        for j in range(len(cfg.enc2d_blocks)):
            p = f"enc2d.b{j}."
            h = self._lrelu(L.conv2d(x, self._p(p + "c1.w"), self._p(p + "c1.b")))
            h = self._lrelu(L.conv2d(h, self._p(p + "c2.w"), self._p(p + "c2.b"), stride=2))
            h = L.conv2d(h, self._p(p + "c3.w"), self._p(p + "c3.b"))
            sc = L.conv2d(x, self._p(p + "sc.w"), self._p(p + "sc.b"), stride=2)
            x = self._lrelu(h + sc)
        flat = x.reshape((x.shape[0], cfg.flat2d))
        return L.fully_connected(flat, self._p("enc2d.fc.w"), self._p("enc2d.fc.b"))

    @_in_model_dtype
    def decode2d(self, latent: Tensor) -> Tensor:
        """(N, latent2d) -> (N, S, S, C); the last block is left linear."""
        cfg = self.config
        g, c = cfg.encoded_grid, cfg.enc2d_blocks[-1][-1]
        x = self._lrelu(L.fully_connected(latent, self._p("dec2d.fc.w"), self._p("dec2d.fc.b")))
        x = x.reshape((latent.shape[0], g, g, c))
        last = len(cfg.dec2d_blocks) - 1
        for j in range(last + 1):
            p = f"dec2d.b{j}."
            h = self._lrelu(L.deconv2d(x, self._p(p + "d1.w"), self._p(p + "d1.b")))
            h = self._lrelu(L.deconv2d(h, self._p(p + "d2.w"), self._p(p + "d2.b"), stride=2))
            h = L.deconv2d(h, self._p(p + "d3.w"), self._p(p + "d3.b"))
            sc = L.conv2d(L.upsample2d(x, 2), self._p(p + "sc.w"), self._p(p + "sc.b"))
            x = h + sc
            if j < last:
                x = self._lrelu(x)
        return x

    # -- audio branch -----------------------------------------------------
    @_in_model_dtype
    def encode1d(self, audio) -> Tensor:
        """(N, audio_length) -> (N, latent1d): flattened output of the last pool."""
        cfg = self.config
        x = T.as_tensor(audio)
        if x.shape[-1] != cfg.audio_length or x.ndim not in (1, 2):
            raise ValueError(f"encode1d expects frames of length {cfg.audio_length}, got {x.shape}")
        n = 1 if x.ndim == 1 else x.shape[0]
        x = x.reshape((n, cfg.audio_length, 1))
        for j, pool in enumerate(cfg.pools):
            x = self._lrelu(L.conv1d(x, self._p(f"enc1d.c{j}.w"), self._p(f"enc1d.c{j}.b")))
            x = L.maxpool1d(x, pool, pool)
        return x.reshape((n, cfg.latent1d))

    @_in_model_dtype
    def decode1d(self, latent: Tensor) -> Tensor:
        """(N, latent1d) -> (N, audio_length) through the FC bottleneck."""
        cfg = self.config
        n = latent.shape[0]
        x = self._lrelu(L.fully_connected(latent, self._p("dec1d.fc_in.w"), self._p("dec1d.fc_in.b")))
        x = self._lrelu(L.fully_connected(x, self._p("dec1d.fc_out.w"), self._p("dec1d.fc_out.b")))
        x = x.reshape((n, cfg.decoder1d_length, cfg.latent1d // cfg.decoder1d_length))
        n_layers = len(cfg.deconv1d_layers)
        for j in range(n_layers):
            x = L.deconv1d(x, self._p(f"dec1d.d{j}.w"), self._p(f"dec1d.d{j}.b"))
            if j == 0:
                x = L.upsample1d(self._lrelu(x), cfg.upsample)
            elif j < n_layers - 1:
                x = self._lrelu(x)
        return x.reshape((n, cfg.audio_length))

    # -- fusion and sequence model ---------------------------------------
    @staticmethod
    def fuse(latent2d: Tensor | None, latent1d: Tensor | None) -> Tensor:
        """Concatenate latents along the feature axis, image features first."""
        parts = [t for t in (latent2d, latent1d) if t is not None]
        if not parts:
            raise ValueError("fuse needs at least one latent")
        return T.concat(parts, axis=-1)

    @_in_model_dtype
    def predict_sequence(self, seq: Tensor) -> Tensor:
        """(B, K, D) fused sequence -> (B, 2) prediction at the last step."""
        cfg = self.config
        if seq.ndim != 3 or seq.shape[-1] != cfg.fused_size:
            raise ValueError(f"expected (B, K, {cfg.fused_size}) sequence, got {seq.shape}")
        b, steps = seq.shape[0], seq.shape[1]
        layers = [self.lstm_layer(j) for j in range(cfg.lstm_layers)]
        head_w, head_b = self._p("head.w"), self._p("head.b")
        if not cfg.feedback_predictions:
            x = seq
            for p in layers:
                x = L.lstm_sequence(x, p)
            return L.fully_connected(x[:, -1, :], head_w, head_b)
        # the previous prediction joins the input, so run time-major
        zeros = Tensor(np.zeros((b, cfg.lstm_hidden)))
        state = [(zeros, zeros) for _ in layers]
        pred = Tensor(np.zeros((b, 2)))
        for t in range(steps):
            x = T.concat([seq[:, t, :], pred], axis=-1)
            for j, p in enumerate(layers):
                h, c = L.lstm_cell(x, state[j][0], state[j][1], p)
                state[j] = (h, c)
                x = h
            pred = L.fully_connected(x, head_w, head_b)
        return pred

    @_in_model_dtype
    def forward(self, images, audio, index) -> ForwardOutputs:
        """Run a batch of windows.

        ``images``/``audio`` hold the distinct frames used by the batch and
        ``index`` (B, k+1) selects, per window, the rows forming its sequence.
        Each frame is encoded and reconstructed once, however many windows
        share it.
        """
        cfg = self.config
        index = np.asarray(index)
        if index.ndim != 2 or index.shape[1] != cfg.window:
            raise ValueError(f"index must be (B, {cfg.window}), got {index.shape}")
        lat2d = self.encode2d(images) if cfg.use_visual else None
        lat1d = self.encode1d(audio) if cfg.use_audio else None
        fused = self.fuse(lat2d, lat1d)
        seq = T.take(fused, index, axis=0)
        pred = self.predict_sequence(seq)
        rec2d = self.decode2d(lat2d) if cfg.use_visual and cfg.autoencoder else None
        rec1d = self.decode1d(lat1d) if cfg.use_audio and cfg.autoencoder else None
        return ForwardOutputs(lat2d, lat1d, fused, rec2d, rec1d, pred)

    @_in_model_dtype
    def predict_window(self, images, audio) -> tuple[float, float]:
        """Predict (arousal, valence) for one window of k+1 consecutive frames."""
        cfg = self.config
        n = len(images) if images is not None else len(audio)
        if n != cfg.window:
            raise ValueError(f"window must hold {cfg.window} frames, got {n}")
        with T.no_grad():
            lat2d = self.encode2d(np.asarray(images)) if cfg.use_visual else None
            lat1d = self.encode1d(np.asarray(audio)) if cfg.use_audio else None
            fused = self.fuse(lat2d, lat1d)
            pred = self.predict_sequence(fused.reshape((1, n, cfg.fused_size)))
        a, v = pred.data[0]
        return float(a), float(v)

    @_in_model_dtype
    def predict_frames(self, images, audio, index, chunk: int = 256) -> np.ndarray:
        """Gradient-free predictions for many windows over a frame table."""
        cfg = self.config
        with T.no_grad():
            parts = []
            n = len(images) if images is not None else len(audio)
            for s in range(0, n, chunk):
                l2 = self.encode2d(images[s : s + chunk]) if cfg.use_visual else None
                l1 = self.encode1d(audio[s : s + chunk]) if cfg.use_audio else None
                parts.append(self.fuse(l2, l1).data)
            fused = Tensor(np.concatenate(parts, axis=0))
            preds = []
            index = np.asarray(index)
            for s in range(0, len(index), chunk):
                seq = T.take(fused, index[s : s + chunk], axis=0)
                preds.append(self.predict_sequence(seq).data)
        return np.concatenate(preds, axis=0) if preds else np.zeros((0, 2))

    # -- state --------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.copy()


def layer_shapes(config: ModelConfig | None = None) -> list[tuple[str, tuple[int, ...]]]:
    """Trace per-layer output shapes of both auto-encoders on a single frame."""
    model = AffectModel(config or ModelConfig(), seed=None)
    cfg = model.config
    trace: list[tuple[str, tuple[int, ...]]] = []
    rng = np.random.default_rng(0)
    with T.no_grad():
        if cfg.use_visual:
            x = Tensor(rng.uniform(-1, 1, (1, cfg.image_size, cfg.image_size, cfg.image_channels)))
            for j in range(len(cfg.enc2d_blocks)):
                p = f"enc2d.b{j}."
                h = L.conv2d(x, model._p(p + "c1.w"), model._p(p + "c1.b"))
                trace.append((p + "c1", h.shape[1:]))
                h = L.conv2d(h, model._p(p + "c2.w"), model._p(p + "c2.b"), stride=2)
                trace.append((p + "c2", h.shape[1:]))
                h = L.conv2d(h, model._p(p + "c3.w"), model._p(p + "c3.b"))
                x = L.leaky_relu(h + L.conv2d(x, model._p(p + "sc.w"), model._p(p + "sc.b"), stride=2))
                trace.append((p + "c3", x.shape[1:]))
            lat = model.encode2d(Tensor(rng.uniform(-1, 1, (1, cfg.image_size, cfg.image_size, 3))))
            trace.append(("enc2d.fc", lat.shape[1:]))
            if cfg.autoencoder:
                g, c = cfg.encoded_grid, cfg.enc2d_blocks[-1][-1]
                x = L.fully_connected(lat, model._p("dec2d.fc.w"), model._p("dec2d.fc.b"))
                trace.append(("dec2d.fc", x.shape[1:]))
                x = x.reshape((1, g, g, c))
                for j in range(len(cfg.dec2d_blocks)):
                    p = f"dec2d.b{j}."
                    h = L.deconv2d(x, model._p(p + "d1.w"), model._p(p + "d1.b"))
                    trace.append((p + "d1", h.shape[1:]))
                    h = L.deconv2d(h, model._p(p + "d2.w"), model._p(p + "d2.b"), stride=2)
                    trace.append((p + "d2", h.shape[1:]))
                    h = L.deconv2d(h, model._p(p + "d3.w"), model._p(p + "d3.b"))
                    x = h + L.conv2d(L.upsample2d(x, 2), model._p(p + "sc.w"), model._p(p + "sc.b"))
                    trace.append((p + "d3", x.shape[1:]))
        if cfg.use_audio:
            x = Tensor(rng.normal(size=(1, cfg.audio_length, 1)))
            for j, pool in enumerate(cfg.pools):
                x = L.conv1d(x, model._p(f"enc1d.c{j}.w"), model._p(f"enc1d.c{j}.b"))
                trace.append((f"enc1d.c{j}", x.shape[1:]))
                x = L.maxpool1d(x, pool, pool)
                trace.append((f"enc1d.pool{j}", x.shape[1:]))
            lat = x.reshape((1, cfg.latent1d))
            trace.append(("enc1d.flat", lat.shape[1:]))
            if cfg.autoencoder:
                x = L.fully_connected(lat, model._p("dec1d.fc_in.w"), model._p("dec1d.fc_in.b"))
                trace.append(("dec1d.fc_in", x.shape[1:]))
                x = L.fully_connected(x, model._p("dec1d.fc_out.w"), model._p("dec1d.fc_out.b"))
                trace.append(("dec1d.fc_out", x.shape[1:]))
                x = x.reshape((1, cfg.decoder1d_length, cfg.latent1d // cfg.decoder1d_length))
                trace.append(("dec1d.reshape", x.shape[1:]))
                for j in range(len(cfg.deconv1d_layers)):
                    x = L.deconv1d(x, model._p(f"dec1d.d{j}.w"), model._p(f"dec1d.d{j}.b"))
                    trace.append((f"dec1d.d{j}", x.shape[1:]))
                    if j == 0:
                        x = L.upsample1d(x, cfg.upsample)
                        trace.append(("dec1d.upsample", x.shape[1:]))
    return trace
