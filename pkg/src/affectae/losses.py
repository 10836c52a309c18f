"""Reconstruction and concordance losses.

Concordance uses population statistics (divide by n). When the denominator
vanishes (both series constant with equal means) the coefficient is defined
as 0 and a :class:`DegenerateCCCWarning` is emitted; constant predictions
against a varying target also warn, since they carry no concordance.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_WEIGHTS = (1.0, 1.0, 0.01)

diagnostics: Counter = Counter()


class DegenerateCCCWarning(RuntimeWarning):
    pass


def _warn(kind: str) -> None:
    diagnostics[kind] += 1
    warnings.warn(f"degenerate concordance input: {kind}", DegenerateCCCWarning, stacklevel=3)


def _fmean(x: np.ndarray) -> float:
    return math.fsum(x) / len(x)


def ccc(pred, truth) -> float:
    """Concordance correlation coefficient of two equal-length series."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"ccc: length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("ccc needs at least two samples")
    mx, my = _fmean(x), _fmean(y)
    dx, dy = x - mx, y - my
    vx, vy = _fmean(dx * dx), _fmean(dy * dy)
    cov = _fmean(dx * dy)
    den = vx + vy + (mx - my) ** 2
    if den == 0.0:
        _warn("zero denominator")
        return 0.0
    if vx == 0.0 or vy == 0.0:
        _warn("constant series")
    return 2.0 * cov / den


def ccc_tensor(pred: Tensor, truth) -> Tensor:
    """Differentiable concordance between a prediction series and targets."""
    y = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=T.DTYPE).ravel()
    if pred.size != y.size:
        raise ValueError(f"ccc: length mismatch {pred.size} vs {y.size}")
    if y.size < 2:
        raise ValueError("ccc needs at least two samples")
    x = pred.reshape((pred.size,))
    mx = T.reduce_mean(x)
    my = float(y.mean())
    vy = float(((y - my) ** 2).mean())
    dx = x - mx
    vx = T.reduce_mean(T.square(dx))
    cov = T.reduce_mean(T.mul(dx, Tensor(y - my)))
    den = vx + (vy + T.square(mx - my))
    if den.item() == 0.0:
        _warn("zero denominator")
        return T.scale(T.reduce_sum(x), 0.0)
    return T.scale(T.div(cov, den), 2.0)


def loss_recon(recon: Tensor, target) -> Tensor:
    """Sum over the batch of squared l2 reconstruction errors."""
    target = np.asarray(target, dtype=T.DTYPE)
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction {recon.shape} does not match target {target.shape}")
    return T.reduce_sum(T.square(recon - Tensor(target)))


def loss_rec(a_hat, a, v_hat, v):
    """``1 - (rho_a + rho_v) / 2``; tensors in give a tensor out."""
    if isinstance(a_hat, Tensor):
        if not (a_hat.size == np.size(a) == v_hat.size == np.size(v)):
            raise ValueError("loss_rec: series lengths differ")
        rho = ccc_tensor(a_hat, a) + ccc_tensor(v_hat, v)
        return T.scale(rho, -0.5) + 1.0
    if not (np.size(a_hat) == np.size(a) == np.size(v_hat) == np.size(v)):
        raise ValueError("loss_rec: series lengths differ")
    return 1.0 - 0.5 * (ccc(a_hat, a) + ccc(v_hat, v))


def combine(l2d, l1d, lrec, alpha: float = 1.0, beta: float = 1.0, gamma: float = 0.01):
    """Weighted joint objective ``alpha*L2D + beta*L1D + gamma*LRec``."""
    return alpha * l2d + beta * l1d + gamma * lrec


@dataclass
class LossParts:
    total: Tensor
    l2d: float
    l1d: float
    lrec: float


def total_loss(outputs, images, audio, labels, alpha=1.0, beta=1.0, gamma=0.01) -> LossParts:
    """Joint objective over one batch.

    ``outputs`` is a :class:`ForwardOutputs`; ``images``/``audio`` are the
    distinct frames the batch encoded and ``labels`` the (B, 2) targets.
    """
    labels = np.asarray(labels, dtype=T.DTYPE)
    pred = outputs.prediction
    lrec = loss_rec(pred[:, 0], labels[:, 0], pred[:, 1], labels[:, 1])
    total = T.scale(lrec, gamma)
    l2d = l1d = 0.0
    if outputs.recon_image is not None:
        t = loss_recon(outputs.recon_image, images)
        l2d = t.item()
        total = total + T.scale(t, alpha)
    if outputs.recon_audio is not None:
        t = loss_recon(outputs.recon_audio, audio)
        l1d = t.item()
        total = total + T.scale(t, beta)
    return LossParts(total, l2d, l1d, lrec.item())
