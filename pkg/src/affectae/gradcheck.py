"""Finite-difference verification of every layer, both loss terms and a tiny
end-to-end model, in 64-bit arithmetic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import losses
from . import tensor as T
from .layers import ConvSpec
from .model import AffectModel, ModelConfig
from .tensor import Tensor

EPS = 1e-5
TOLERANCE = 1e-4
SEEDS = tuple(range(10))


@dataclass
class CheckResult:
    name: str
    max_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max rel err {self.max_error:.2e} over {self.seeds} seed(s)"


def _projected(op: Callable[..., Tensor], rng: np.random.Generator, out_shape) -> Callable[..., Tensor]:
    """Contract an op's output with a fixed random tensor to get a scalar."""
    r = Tensor(rng.normal(size=out_shape))
    return lambda *a: T.reduce_sum(op(*a) * r)


def _check_op(op, inputs: list[np.ndarray], rng) -> float:
    """Check the gradient with respect to every array in ``inputs``."""
    out_shape = op(*[Tensor(x) for x in inputs]).shape
    f = _projected(op, rng, out_shape)
    worst = 0.0
    for i in range(len(inputs)):
        def wrt(x, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = x
            return f(*args)

        worst = max(worst, T.grad_check(wrt, inputs[i], eps=EPS))
    return worst


def _conv_case(transposed: bool, spatial: int, stride: int):
    def make(rng):
        k = (3, 2)[:spatial] if spatial == 2 else (4,)
        spec = ConvSpec(k, stride, 2, 3, transposed=transposed)
        x = rng.normal(size=(2, 5, 4, 2) if spatial == 2 else (2, 7, 2))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=3)
        fn = {(False, 2): L.conv2d, (True, 2): L.deconv2d, (False, 1): L.conv1d, (True, 1): L.deconv1d}[(transposed, spatial)]
        return (lambda x, w, b: fn(x, w, b, stride=stride)), [x, w, b]

    return make


def _lstm_case(rng):
    n_in, hid = 3, 4

    def op(x, h, c, *ws):
        p = L.LstmLayerParams(*ws)
        h2, c2 = L.lstm_cell(x, h, c, p)
        return T.concat([h2, c2], axis=-1)

    ws = [rng.normal(scale=0.5, size=(hid, n_in + hid)) for _ in range(4)] + [rng.normal(size=hid) for _ in range(4)]
    return op, [rng.normal(size=(2, n_in)), rng.normal(size=(2, hid)), rng.normal(size=(2, hid)), *ws]


def _lstm_sequence_case(rng):
    n_in, hid = 3, 4

    def op(x, *ws):
        return L.lstm_sequence(x, L.LstmLayerParams(*ws))

    ws = [rng.normal(scale=0.5, size=(hid, n_in + hid)) for _ in range(4)] + [rng.normal(size=hid) for _ in range(4)]
    return op, [rng.normal(size=(2, 5, n_in)), *ws]


def _loss_rec_case(rng):
    a, v = rng.uniform(-1, 1, size=6), rng.uniform(-1, 1, size=6)

    def op(pa, pv):
        return losses.loss_rec(pa, a, pv, v)

    return op, [rng.normal(size=6), rng.normal(size=6)]


def _loss_recon_case(rng):
    target = rng.normal(size=(3, 4, 2))
    return (lambda r: losses.loss_recon(r, target)), [rng.normal(size=(3, 4, 2))]


CASES: dict[str, Callable] = {
    "conv2d stride 1": _conv_case(False, 2, 1),
    "conv2d stride 2": _conv_case(False, 2, 2),
    "deconv2d stride 1": _conv_case(True, 2, 1),
    "deconv2d stride 2": _conv_case(True, 2, 2),
    "conv1d": _conv_case(False, 1, 1),
    "deconv1d": _conv_case(True, 1, 1),
    "maxpool1d": lambda rng: ((lambda x: L.maxpool1d(x, 2)), [rng.normal(size=(2, 8, 3))]),
    "upsample1d": lambda rng: ((lambda x: L.upsample1d(x, 2)), [rng.normal(size=(2, 4, 3))]),
    "upsample2d": lambda rng: ((lambda x: L.upsample2d(x, 2)), [rng.normal(size=(2, 3, 2, 2))]),
    "fully_connected": lambda rng: (L.fully_connected, [rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)]),
    "leaky_relu": lambda rng: (L.leaky_relu, [rng.normal(size=(4, 5))]),
    "lstm_cell": _lstm_case,
    "lstm_sequence": _lstm_sequence_case,
    "reconstruction loss": _loss_recon_case,
    "concordance loss": _loss_rec_case,
}


def check_case(name: str, seeds=SEEDS) -> CheckResult:
    worst = 0.0
    with T.default_dtype(np.float64):
        for s in seeds:
            rng = np.random.default_rng(s)
            op, inputs = CASES[name](rng)
            worst = max(worst, _check_op(op, inputs, rng))
    return CheckResult(name, worst, len(seeds))


def check_model(seed: int = 0, config: ModelConfig | None = None) -> CheckResult:
    """Every parameter of a tiny model against the full joint loss.

    Parameters are jittered off their initial values first: zero biases
    put LeakyReLU inputs exactly on the kink, where central differences
    are meaningless. The score is the norm-wise relative error per tensor.
    """
    cfg = config or ModelConfig.tiny()
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        model = AffectModel(cfg, seed=seed)
        for p in model.params.values():
            p.data += rng.normal(scale=0.1, size=p.shape)
        n_frames = cfg.window + 2
        images = rng.uniform(-1, 1, size=(n_frames, cfg.image_size, cfg.image_size, cfg.image_channels))
        audio = rng.uniform(-1, 1, size=(n_frames, cfg.audio_length))
        index = np.array([[t + j for j in range(cfg.window)] for t in range(3)])
        labels = rng.uniform(-1, 1, size=(3, 2))

        def f():
            out = model.forward(images, audio, index)
            return losses.total_loss(out, images, audio, labels, 1.0, 1.0, 1.0).total

        err = T.grad_check_params(f, list(model.params.values()), eps=EPS, measure="norm")
    return CheckResult("tiny model end to end", err, 1)


def run_suite(seeds=SEEDS, report: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name in CASES:
        results.append(check_case(name, seeds))
        if report:
            report(results[-1].line())
    results.append(check_model())
    if report:
        report(results[-1].line())
    return results
