"""Neural building blocks: convolution, transposed convolution, pooling,
upsampling, fully connected, LeakyReLU and the LSTM (per cell or per sequence).

Layout is channels-last. 2-D ops take ``(H, W, C)`` or ``(N, H, W, C)``;
1-D ops take ``(L, C)`` or ``(N, L, C)``. Padding is "same-ceil": a
convolution with stride ``s`` maps extent ``n`` to ``ceil(n / s)``, with
any odd padding cell placed after the data. A transposed convolution is the
exact adjoint of that map, so it multiplies the extent by ``s``.

Convolution kernels are ``(kh, kw, C_in, C_out)``. Transposed-convolution
kernels are stored the other way round, ``(kh, kw, C_out, C_in)``, so one
kernel array serves both a convolution and its adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import tensor as T
from .tensor import Tensor, record

LEAKY_SLOPE = 0.2

# cap on the im2col scratch buffer, in elements
_COLS_BUDGET = 8_000_000


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, ...]
    stride: int
    in_channels: int
    out_channels: int
    bias: bool = True
    transposed: bool = False

    def __post_init__(self):
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.stride < 1 or any(k < 1 for k in self.kernel):
            raise ValueError("kernel extents and stride must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.transposed:
            return (*self.kernel, self.out_channels, self.in_channels)
        return (*self.kernel, self.in_channels, self.out_channels)

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.kernel)) * self.in_channels

    def output_extent(self, n: int) -> int:
        return n * self.stride if self.transposed else -(-n // self.stride)


def same_padding(n: int, k: int, s: int) -> tuple[int, int, int]:
    """Output extent and (before, after) padding for a same-ceil convolution."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


# ---------------------------------------------------------------------------
# array-level convolution kernels (4-D, channels-last)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw, c), (s0, s1 * sh, s2 * sw, s1, s2, s3), writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c)


def _chunks(n: int, per_item: int):
    step = max(1, _COLS_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


class _Geometry:
    """Padding bookkeeping shared by forward and adjoint passes."""

    def __init__(self, h: int, w: int, kh: int, kw: int, sh: int, sw: int):
        self.h, self.w, self.kh, self.kw, self.sh, self.sw = h, w, kh, kw, sh, sw
        self.ho, self.pt, self.pb = same_padding(h, kh, sh)
        self.wo, self.pl, self.pr = same_padding(w, kw, sw)
        self.hp = h + self.pt + self.pb
        self.wp = w + self.pl + self.pr
        if self.hp < kh or self.wp < kw:
            raise ValueError(f"kernel {(kh, kw)} larger than padded input {(self.hp, self.wp)}")
        self.pointwise = kh == kw == sh == sw == 1

    def pad(self, x: np.ndarray) -> np.ndarray:
        if not (self.pt or self.pb or self.pl or self.pr):
            return x
        return np.pad(x, ((0, 0), (self.pt, self.pb), (self.pl, self.pr), (0, 0)))

    def crop(self, xp: np.ndarray) -> np.ndarray:
        return xp[:, self.pt : self.pt + self.h, self.pl : self.pl + self.w, :]


def _conv_fwd(x: np.ndarray, w: np.ndarray, geo: _Geometry) -> np.ndarray:
    n, _, _, c = x.shape
    co = w.shape[-1]
    wm = w.reshape(-1, co)
    if geo.pointwise:
        return (x.reshape(-1, c) @ wm).reshape(n, geo.ho, geo.wo, co)
    xp = geo.pad(x)
    out = np.empty((n, geo.ho, geo.wo, co), dtype=x.dtype)
    per = geo.ho * geo.wo * wm.shape[0]
    for sl in _chunks(n, per):
        cols = _im2col(xp[sl], geo.kh, geo.kw, geo.sh, geo.sw, geo.ho, geo.wo)
        out[sl] = (cols @ wm).reshape(-1, geo.ho, geo.wo, co)
    return out


def _conv_adj(g: np.ndarray, w: np.ndarray, geo: _Geometry) -> np.ndarray:
    """Adjoint of ``_conv_fwd`` with respect to its input.

    Evaluated per output phase: the input cells whose padded index is
    congruent to ``r`` modulo the stride only see kernel taps ``r, r+s, ...``,
    so each phase is a stride-1 correlation of the zero-extended gradient
    with a flipped sub-kernel. No scatter-add is needed.
    """
    n = g.shape[0]
    c, co = w.shape[-2], w.shape[-1]
    if geo.pointwise:
        return (g.reshape(-1, co) @ w.reshape(-1, co).T).reshape(n, geo.h, geo.w, c)
    dx = np.zeros((n, geo.h, geo.w, c), dtype=g.dtype)
    for ph in range(min(geo.sh, geo.kh)):
        rows = _phase(ph, geo.kh, geo.sh, geo.pt, geo.h, geo.ho)
        for pw in range(min(geo.sw, geo.kw)):
            cols_ = _phase(pw, geo.kw, geo.sw, geo.pl, geo.w, geo.wo)
            _adj_phase(g, w, ph, pw, rows, cols_, geo, dx)
    return dx


def _phase(r: int, k: int, s: int, pad: int, n: int, n_out: int):
    """Index bookkeeping for one adjoint phase along one axis.

    Returns (taps, first output cell, count, (pad before, pad after), first
    padded-gradient index).
    """
    taps = -(-(k - r) // s)
    m0 = -(-(pad - r) // s)
    m1 = -(-(pad + n - r) // s)
    first = s * m0 + r - pad
    return taps, first, m1 - m0, (taps - 1, max(0, m1 - n_out)), m0


def _adj_phase(g, w, ph, pw, rows, cols_, geo, dx) -> None:
    jh, h0, mh, padh, mh0 = rows
    jw, w0, mw, padw, mw0 = cols_
    if mh <= 0 or mw <= 0:
        return
    co, c = w.shape[-1], w.shape[-2]
    sub = w[ph :: geo.sh, pw :: geo.sw][::-1, ::-1].transpose(0, 1, 3, 2)
    wm = np.ascontiguousarray(sub).reshape(-1, c)
    gp = np.pad(g, ((0, 0), padh, padw, (0, 0))) if any(padh + padw) else g
    gp = gp[:, mh0 : mh0 + mh + jh - 1, mw0 : mw0 + mw + jw - 1]
    tgt = dx[:, h0 :: geo.sh, w0 :: geo.sw]
    per = mh * mw * wm.shape[0]
    for sl in _chunks(g.shape[0], per):
        cols = _im2col(gp[sl], jh, jw, 1, 1, mh, mw)
        tgt[sl] = (cols @ wm).reshape(-1, mh, mw, c)


def _conv_wgrad(x: np.ndarray, g: np.ndarray, wshape: tuple, geo: _Geometry) -> np.ndarray:
    c = x.shape[-1]
    co = g.shape[-1]
    if geo.pointwise:
        return (x.reshape(-1, c).T @ g.reshape(-1, co)).reshape(wshape)
    xp = geo.pad(x)
    acc = np.zeros((geo.kh * geo.kw * c, co), dtype=x.dtype)
    per = geo.ho * geo.wo * geo.kh * geo.kw * c
    for sl in _chunks(x.shape[0], per):
        cols = _im2col(xp[sl], geo.kh, geo.kw, geo.sh, geo.sw, geo.ho, geo.wo)
        acc += cols.T @ g[sl].reshape(-1, co)
    return acc.reshape(wshape)


def _lift(x: np.ndarray, spatial: int) -> tuple[np.ndarray, bool]:
    """Bring an input to (N, H, W, C); returns whether a batch axis was added."""
    unbatched = x.ndim == spatial + 1
    if unbatched:
        x = x[None]
    if spatial == 1:
        x = x[:, None]
    return x, unbatched


def _lower(y: np.ndarray, spatial: int, unbatched: bool) -> np.ndarray:
    if spatial == 1:
        y = y[:, 0]
    return y[0] if unbatched else y


def _check_input(x: Tensor, w: Tensor, spatial: int, channel_axis: int, op: str) -> None:
    if x.ndim not in (spatial + 1, spatial + 2):
        raise ValueError(f"{op}: expected {spatial + 1}-D or {spatial + 2}-D input, got {x.shape}")
    if w.ndim != spatial + 2:
        raise ValueError(f"{op}: kernel must be {spatial + 2}-D, got {w.shape}")
    if x.shape[-1] != w.shape[channel_axis]:
        raise ValueError(
            f"{op}: input has {x.shape[-1]} channels, kernel expects {w.shape[channel_axis]}"
        )


def _conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, spatial: int) -> Tensor:
    op = f"conv{spatial}d"
    _check_input(x, w, spatial, -2, op)
    x4, unbatched = _lift(x.data, spatial)
    w4 = w.data if spatial == 2 else w.data[None]
    sh = stride if spatial == 2 else 1
    geo = _Geometry(x4.shape[1], x4.shape[2], w4.shape[0], w4.shape[1], sh, stride)
    y = _conv_fwd(x4, w4, geo)
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g4, _ = _lift(g, spatial)
        dx = _lower(_conv_adj(g4, w4, geo), spatial, unbatched) if x.requires_grad else None
        dw = _conv_wgrad(x4, g4, w4.shape, geo).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g4.sum(axis=(0, 1, 2))

    return record(_lower(y, spatial, unbatched), parents, bw)


def _deconv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, spatial: int) -> Tensor:
    op = f"deconv{spatial}d"
    _check_input(x, w, spatial, -1, op)
    x4, unbatched = _lift(x.data, spatial)
    w4 = w.data if spatial == 2 else w.data[None]
    sh = stride if spatial == 2 else 1
    h_out = x4.shape[1] * sh
    w_out = x4.shape[2] * stride
    geo = _Geometry(h_out, w_out, w4.shape[0], w4.shape[1], sh, stride)
    y = _conv_adj(x4, w4, geo)
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g4, _ = _lift(g, spatial)
        dx = _lower(_conv_fwd(g4, w4, geo), spatial, unbatched) if x.requires_grad else None
        dw = _conv_wgrad(g4, x4, w4.shape, geo).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g4.sum(axis=(0, 1, 2))

    return record(_lower(y, spatial, unbatched), parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    return _conv(x, w, b, stride, 2)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    return _deconv(x, w, b, stride, 2)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    return _conv(x, w, b, stride, 1)


def deconv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    return _deconv(x, w, b, stride, 1)


# ---------------------------------------------------------------------------
# pooling and resampling


def maxpool1d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-channel max over windows along the length axis.

    Output length is ``(L - window) // stride + 1``. Gradient goes to the
    first maximal element of each window.
    """
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    n, length, c = xd.shape
    if window > length:
        raise ValueError(f"maxpool1d: window {window} exceeds length {length}")
    lo = (length - window) // stride + 1
    s0, s1, s2 = xd.strides
    view = as_strided(xd, (n, lo, window, c), (s0, s1 * stride, s1, s2), writeable=False)
    arg = view.argmax(axis=2)
    out = np.take_along_axis(view, arg[:, :, None, :], axis=2)[:, :, 0, :]
    src = arg + (np.arange(lo) * stride)[None, :, None]

    def bw(g):
        g3 = g[None] if unbatched else g
        dx = np.zeros_like(xd)
        if stride >= window:
            np.put_along_axis(dx, src, g3, axis=1)
        else:
            ni, _, ci = np.meshgrid(np.arange(n), np.arange(lo), np.arange(c), indexing="ij")
            np.add.at(dx, (ni, src, ci), g3)
        return (dx[0] if unbatched else dx,)

    return record(out[0] if unbatched else out, (x,), bw)


def upsample1d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour repetition along the length axis."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    axis = x.ndim - 2
    out = np.repeat(x.data, factor, axis=axis)

    def bw(g):
        shp = list(x.shape)
        shp.insert(axis + 1, factor)
        return (g.reshape(shp).sum(axis=axis + 1),)

    return record(out, (x,), bw)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    ax = x.ndim - 3
    out = np.repeat(np.repeat(x.data, factor, axis=ax), factor, axis=ax + 1)

    def bw(g):
        shp = list(x.shape)
        shp[ax + 1 : ax + 1] = [factor]
        shp[ax + 3 : ax + 3] = [factor]
        return (g.reshape(shp).sum(axis=(ax + 1, ax + 3)),)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# dense layers and activations


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (n,) or (N, n) and ``w`` of (m, n)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"fully_connected: bias {b.shape} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        # computed as (W^T g^T)^T: BLAS streams the large weight faster this way
        dx = (w.data.T @ g2.T).T.reshape(x.shape) if x.requires_grad else None
        dw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return record(y, parents, bw)


@numba.njit(cache=True, nogil=True)
def _leaky_grad(g, x, slope):
    out = np.empty_like(g)
    for i in range(g.size):
        out[i] = g[i] if x[i] >= 0 else slope * g[i]
    return out


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    xd = x.data
    out = np.maximum(xd, xd * xd.dtype.type(slope))

    def bw(g):
        gc = np.ascontiguousarray(g)
        xc = np.ascontiguousarray(xd)
        return (_leaky_grad(gc.reshape(-1), xc.reshape(-1), gc.dtype.type(slope)).reshape(g.shape),)

    return record(out, (x,), bw)


@dataclass
class LstmLayerParams:
    w_i: Tensor
    w_f: Tensor
    w_g: Tensor
    w_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_g: Tensor
    b_o: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.shape[1] - self.w_i.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmLayerParams) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise ValueError(
            f"lstm_cell: got input {x.shape[-1]} / hidden {h_prev.shape[-1]}, "
            f"layer expects {p.input_size} / {p.hidden_size}"
        )
    if c_prev.shape != h_prev.shape:
        raise ValueError(f"lstm_cell: cell state {c_prev.shape} vs hidden {h_prev.shape}")
    z = T.concat([x, h_prev], axis=-1)
    i = T.sigmoid(fully_connected(z, p.w_i, p.b_i))
    f = T.sigmoid(fully_connected(z, p.w_f, p.b_f))
    g = T.tanh(fully_connected(z, p.w_g, p.b_g))
    o = T.sigmoid(fully_connected(z, p.w_o, p.b_o))
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


def _sig(a: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def lstm_sequence(xs: Tensor, p: LstmLayerParams) -> Tensor:
    """Run one LSTM layer over ``xs`` of shape (B, T, n_in) from a zero state.

    Returns the hidden states (B, T, H). Equivalent to chaining
    :func:`lstm_cell` over time, but recorded as a single op: the backward
    pass runs backpropagation through time by hand, and each weight
    gradient is one matrix product over all time steps instead of one per
    step.
    """
    if xs.ndim != 3 or xs.shape[-1] != p.input_size:
        raise ValueError(f"lstm_sequence: input {xs.shape} does not match layer input size {p.input_size}")
    b, steps, n_in = xs.shape
    hid = p.hidden_size
    gates = (p.w_i, p.w_f, p.w_g, p.w_o)
    w = np.concatenate([t.data for t in gates], axis=0)
    bias = np.concatenate([p.b_i.data, p.b_f.data, p.b_g.data, p.b_o.data])
    wx, wh = w[:, :n_in], w[:, n_in:]
    x2 = xs.data.reshape(b * steps, n_in)
    pre = (x2 @ wx.T + bias).reshape(b, steps, 4 * hid)
    dt = pre.dtype
    acts = np.empty((b, steps, 4 * hid), dt)  # i, f, g, o after their nonlinearity
    cells = np.empty((b, steps + 1, hid), dt)  # slot 0 holds the initial state
    hs = np.empty((b, steps + 1, hid), dt)
    cells[:, 0] = 0.0
    hs[:, 0] = 0.0
    for t in range(steps):
        a = pre[:, t] + hs[:, t] @ wh.T
        acts[:, t] = _sig(a)
        acts[:, t, 2 * hid : 3 * hid] = np.tanh(a[:, 2 * hid : 3 * hid])
        i, f, g, o = np.split(acts[:, t], 4, axis=1)
        cells[:, t + 1] = f * cells[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cells[:, t + 1])
    out = hs[:, 1:].copy()

    def bw(grad):
        d_pre = np.empty_like(acts)
        dh_next = np.zeros((b, hid), dt)
        dc_next = np.zeros((b, hid), dt)
        for t in range(steps - 1, -1, -1):
            i, f, g, o = np.split(acts[:, t], 4, axis=1)
            tc = np.tanh(cells[:, t + 1])
            dh = grad[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            d_pre[:, t, :hid] = dc * g * i * (1.0 - i)
            d_pre[:, t, hid : 2 * hid] = dc * cells[:, t] * f * (1.0 - f)
            d_pre[:, t, 2 * hid : 3 * hid] = dc * i * (1.0 - g * g)
            d_pre[:, t, 3 * hid :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d_pre[:, t] @ wh
        d2 = d_pre.reshape(b * steps, 4 * hid)
        dx = (d2 @ wx).reshape(xs.shape) if xs.requires_grad else None
        dwx = d2.T @ x2
        dwh = d2.T @ hs[:, :-1].reshape(b * steps, hid)
        db = d2.sum(axis=0)
        dws = [np.concatenate([dwx[k * hid : (k + 1) * hid], dwh[k * hid : (k + 1) * hid]], axis=1) for k in range(4)]
        dbs = [db[k * hid : (k + 1) * hid] for k in range(4)]
        return (dx, *dws, *dbs)

    return record(out, (xs, *gates, p.b_i, p.b_f, p.b_g, p.b_o), bw)


# ---------------------------------------------------------------------------
# initialisation


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_shapes(spec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes for ``spec`` (see :func:`init_params`)."""
    if isinstance(spec, ConvSpec):
        out = {"w": spec.weight_shape}
        if spec.bias:
            out["b"] = (spec.out_channels,)
        return out
    if len(spec) == 3 and spec[0] == "lstm":
        _, n_in, n_hid = spec
        out = {f"w_{gate}": (n_hid, n_in + n_hid) for gate in "ifgo"}
        out.update({f"b_{gate}": (n_hid,) for gate in "ifgo"})
        return out
    m, n = spec
    return {"w": (m, n), "b": (m,)}


def init_params(spec, seed: int | np.random.Generator | None) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases.

    ``spec`` is a :class:`ConvSpec`, an ``(out, in)`` pair for a fully
    connected layer, or an ``("lstm", input_size, hidden_size)`` triple.
    A ``None`` seed gives all-zero weights without sampling.
    """
    rng = seed if seed is None or isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(spec).items():
        if name.startswith("b") or rng is None:
            out[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = spec.fan_in if isinstance(spec, ConvSpec) else shape[1]
            out[name] = Tensor(uniform_init(shape, fan_in, rng), requires_grad=True)
    return out
