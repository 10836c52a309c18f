"""End-to-end optimisation: Adam, window minibatches, checkpoints and the
learning-curve CSV."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

from . import losses
from . import tensor as T
from .data import FrameTable, Recording
from .model import AffectModel, ModelConfig

logger = logging.getLogger(__name__)

CURVE_COLUMNS = [
    "step",
    "total_loss",
    "l2d",
    "l1d",
    "lrec",
    "val_ccc_arousal",
    "val_ccc_valence",
    "val_Ea",
    "val_Ev",
    "val_Eav",
]

PRECISIONS = {"float64": np.float64, "float32": np.float32}


class NumericError(RuntimeError):
    """Raised when the loss stops being finite."""

    def __init__(self, step: int, recent: Sequence[float]):
        super().__init__(f"non-finite loss at step {step}; last finite losses: {list(recent)}")
        self.step = step
        self.recent = list(recent)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_steps: int = 5000
    seed: int = 0
    k: int = 4
    lstm_hidden: int = 512
    eval_interval: int = 250
    checkpoint_dir: str = "checkpoints"
    modalities: str = "both"
    autoencoder: bool = True
    feedback_predictions: bool = False
    grad_clip: float = 0.0
    run_length: int = 1
    precision: str = "float64"

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_steps", "eval_interval", "lstm_hidden", "run_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("alpha", "beta", "gamma", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.k < 0:
            raise ConfigError("k must be non-negative")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.batch_size % self.run_length:
            raise ConfigError("batch_size must be a multiple of run_length")

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        return dataclasses.replace(
            base or ModelConfig(),
            lstm_hidden=self.lstm_hidden,
            k=self.k,
            modalities=self.modalities,
            autoencoder=self.autoencoder,
            feedback_predictions=self.feedback_predictions,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str) -> TrainConfig:
    """Parse ``key=value`` lines (``#`` comments allowed) into a TrainConfig."""
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(kinds[key], raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _adam_kernel(p, g, m, v, b1, b2, step_size, inv_sqrt_bc2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * mi / (math.sqrt(vi) * inv_sqrt_bc2 + eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing (None) gradient counts as zero. The update is a single fused
    pass per tensor since the large fully connected weights make this step
    memory bound.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            shape = None if g is None else g.shape
            raise ValueError(f"adam_step: {name} param {p.shape}, grad {shape}, moment {m.shape}")
        if g is None:
            g = np.zeros_like(p)
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            raise ValueError(f"adam_step: {name} arrays must be C-contiguous")
        g = np.ascontiguousarray(g, dtype=p.dtype)
        _adam_kernel(
            p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
            p.dtype.type(b1), p.dtype.type(b2), p.dtype.type(lr / bc1),
            p.dtype.type(1.0 / math.sqrt(bc2)), p.dtype.type(state.eps),
        )


def clip_gradients(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    """Rescale ``grads`` (by replacing its values) to global norm ``max_norm``.

    Returns the norm before clipping. Arrays are never modified in place
    because leaf gradients may alias one another.
    """
    total = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return total


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _dtype_code(dt) -> str:
    return np.dtype(dt).newbyteorder("<").str


def save_checkpoint(path, model: AffectModel, state: AdamState | None = None, meta: dict | None = None) -> None:
    """Versioned little-endian container of parameters and optimiser state."""
    header = {
        "model": model.config.to_dict(),
        "meta": meta or {},
        "params": [[name, list(t.shape), _dtype_code(t.data.dtype)] for name, t in model.params.items()],
        "adam": None
        if state is None
        else {"step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name, t in model.params.items():
            fh.write(np.ascontiguousarray(t.data, dtype=_dtype_code(t.data.dtype)).tobytes())
        if state is not None:
            for name in model.params:
                fh.write(np.ascontiguousarray(state.m[name]).astype(_dtype_code(state.m[name].dtype)).tobytes())
                fh.write(np.ascontiguousarray(state.v[name]).astype(_dtype_code(state.v[name].dtype)).tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], AdamState | None]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    _, version, hlen = struct.unpack_from("<4sII", buf, 0)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    off = 12 + hlen
    params: dict[str, np.ndarray] = {}

    def take(shape, code):
        nonlocal off
        dt = np.dtype(code)
        count = int(np.prod(shape))
        if off + count * dt.itemsize > len(buf):
            raise CheckpointError(f"{path}: truncated at byte offset {len(buf)}")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += count * dt.itemsize
        return arr

    for name, shape, code in header["params"]:
        params[name] = take(shape, code)
    state = None
    if header["adam"] is not None:
        a = header["adam"]
        state = AdamState(step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        for name, shape, code in header["params"]:
            state.m[name] = take(shape, code)
            state.v[name] = take(shape, code)
    return header, params, state


def load_checkpoint(path, model: AffectModel | None = None) -> tuple[AffectModel, AdamState | None, dict]:
    """Restore into ``model`` (shapes must match its config) or build a new one."""
    header, params, state = read_checkpoint(path)
    if model is None:
        dtype = np.dtype(header["params"][0][2]).type if header["params"] else T.DTYPE
        with T.default_dtype(dtype):
            model = AffectModel(ModelConfig.from_dict(header["model"]))
    current = {k: t.shape for k, t in model.params.items()}
    stored = {k: tuple(v.shape) for k, v in params.items()}
    if current != stored:
        diff = sorted(k for k in set(current) | set(stored) if current.get(k) != stored.get(k))
        raise CheckpointShapeError(
            f"{path}: checkpoint does not fit the current model config; mismatched {diff[:4]}"
            f" (e.g. {diff[0]}: stored {stored.get(diff[0])}, expected {current.get(diff[0])})"
        )
    for k, t in model.params.items():
        t.data = params[k].astype(t.data.dtype, copy=True)
    if state is not None:
        for k, t in model.params.items():
            state.m[k] = state.m[k].astype(t.data.dtype)
            state.v[k] = state.v[k].astype(t.data.dtype)
    return model, state, header.get("meta", {})


# ---------------------------------------------------------------------------
# batching


class WindowSampler:
    """Deterministic minibatches: each epoch is a seeded permutation of
    window groups, so the batch at any step depends only on (seed, step).

    With ``run_length > 1`` windows are grouped into runs of consecutive
    time steps and whole runs are permuted; every window is still drawn
    exactly once per epoch.
    """

    def __init__(self, table: FrameTable, batch_size: int, seed: int, run_length: int = 1):
        self.batch_size = batch_size
        self.seed = seed
        self.run_length = run_length
        runs = []
        for rec in np.unique(table.window_rec):
            idx = np.flatnonzero(table.window_rec == rec)
            usable = len(idx) - len(idx) % run_length
            runs.append(idx[:usable].reshape(-1, run_length))
        self.runs = np.concatenate(runs)
        self.runs_per_batch = batch_size // run_length
        self.steps_per_epoch = len(self.runs) // self.runs_per_batch
        if self.steps_per_epoch == 0:
            raise ValueError(f"{len(self.runs) * run_length} windows cannot fill a batch of {batch_size}")

    def batch(self, step: int) -> np.ndarray:
        """Window ids for 1-based ``step``."""
        epoch, j = divmod(step - 1, self.steps_per_epoch)
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.runs))
        pick = perm[j * self.runs_per_batch : (j + 1) * self.runs_per_batch]
        return self.runs[pick].reshape(-1)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: AffectModel
    state: AdamState
    history: list[dict]
    curve_path: Path | None
    final_checkpoint: Path | None
    best_checkpoint: Path | None


def train_step(model: AffectModel, state: AdamState, images, audio, index, labels, cfg: TrainConfig):
    """One forward/backward/update; returns the loss parts (before update)."""
    model.zero_grad()
    with T.default_dtype(model.dtype):
        out = model.forward(images, audio, index)
        parts = losses.total_loss(out, images, audio, labels, cfg.alpha, cfg.beta, cfg.gamma)
    total = parts.total.item()
    if not math.isfinite(total):
        return parts, None
    with T.default_dtype(model.dtype):
        T.backward(parts.total)
    grads = {k: t.grad for k, t in model.params.items()}
    if cfg.grad_clip > 0:
        clip_gradients(grads, cfg.grad_clip)
    adam_step(model.state_dict(), grads, state, cfg.learning_rate)
    return parts, grads


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def train(
    config: TrainConfig,
    train_set: Sequence[Recording],
    val_set: Sequence[Recording] | None = None,
    out_dir=None,
    model_config: ModelConfig | None = None,
    resume=None,
    overfit_windows: Sequence[int] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise the joint objective.

    Writes ``curve.csv``, ``final.afck`` and ``best.afck`` (best mean
    validation CCC) under ``out_dir`` when given. ``resume`` names a
    checkpoint to continue from. ``overfit_windows`` pins every step to the
    same window ids (optimisation sanity runs). ``on_step`` sees every
    curve row; a truthy return value stops training after that step.
    """
    if not train_set:
        raise ValueError("empty training set")
    from .metrics import evaluate_model

    dtype = PRECISIONS[config.precision]
    mcfg = config.model_config(model_config)
    table = FrameTable.build(train_set, config.k)
    val_table = FrameTable.build(val_set, config.k) if val_set else None
    sampler = None if overfit_windows is not None else WindowSampler(table, config.batch_size, config.seed, config.run_length)

    with T.default_dtype(dtype):
        model = AffectModel(mcfg, seed=config.seed)
    state = AdamState.for_params(model.state_dict())
    best = -math.inf
    if resume is not None:
        model, loaded, meta = load_checkpoint(resume, model)
        if loaded is not None:
            state = loaded
        best = meta.get("best_val_ccc", best)
        best = -math.inf if best is None else best

    out = Path(out_dir) if out_dir is not None else None
    curve_path = final_path = best_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curve_path = out / "curve.csv"
        final_path = out / "final.afck"
        best_path = out / "best.afck"
        if resume is None or not curve_path.exists():
            with open(curve_path, "w", newline="") as fh:
                csv.writer(fh).writerow(CURVE_COLUMNS)
        else:
            _truncate_curve(curve_path, state.step)

    history: list[dict] = []
    recent: list[float] = []
    start = state.step + 1
    fixed = None
    if overfit_windows is not None:
        fixed = table.batch(np.asarray(overfit_windows), dtype)

    for step in range(start, config.max_steps + 1):
        if fixed is not None:
            images, audio, index, labels = fixed
        else:
            images, audio, index, labels = table.batch(sampler.batch(step), dtype)
        parts, grads = train_step(model, state, images, audio, index, labels, config)
        total = parts.total.item()
        if grads is None:
            raise NumericError(step, recent[-5:])
        recent.append(total)
        row = {"step": step, "total_loss": total, "l2d": parts.l2d, "l1d": parts.l1d, "lrec": parts.lrec}
        if val_table is not None and (step % config.eval_interval == 0 or step == config.max_steps):
            rep = evaluate_model(model, val_table)
            row.update(
                val_ccc_arousal=rep.ccc_a,
                val_ccc_valence=rep.ccc_v,
                val_Ea=rep.e_a,
                val_Ev=rep.e_v,
                val_Eav=rep.e_av,
            )
            score = 0.5 * (rep.ccc_a + rep.ccc_v)
            if score > best:
                best = score
                if best_path is not None:
                    save_checkpoint(best_path, model, state, {"step": step, "best_val_ccc": best, "train": dataclasses.asdict(config)})
            logger.info("step %d loss %.6g val ccc a=%.3f v=%.3f", step, total, rep.ccc_a, rep.ccc_v)
        history.append(row)
        if curve_path is not None:
            with open(curve_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(c)) for c in CURVE_COLUMNS])
        if on_step is not None and on_step(row):
            break

    if final_path is not None:
        save_checkpoint(
            final_path,
            model,
            state,
            {"step": state.step, "best_val_ccc": None if best == -math.inf else best, "train": dataclasses.asdict(config)},
        )
    return TrainResult(model, state, history, curve_path, final_path, best_path)


def _truncate_curve(path: Path, step: int) -> None:
    """Drop curve rows past ``step`` so a resumed run appends seamlessly."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
