"""Reverse-mode automatic differentiation over small dense tensors.

The op set is exactly what the surface model needs: batched affine layers, 3x3
convolutions with zero padding, nearest-neighbor upsampling, bilinear grid
lookups, segment reductions, and a handful of pointwise/reduction primitives.

Arithmetic is float32 unless the inputs are float64; the finite-difference
oracle promotes everything to float64. One `Tape` records one forward pass and
`backprop` consumes it once, in reverse order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, TapeError

_ACTIVE: "Tape | None" = None
_KINKS: "list[np.ndarray] | None" = None


class Tensor:
    """Dense array (up to 4 axes) with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensors are limited to 4 axes, got {arr.ndim}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def param(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def const(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of one forward pass; activate as a context manager.

    Topological order is the recording order: inputs always precede outputs.
    One backward pass per tape.
    """

    def __init__(self):
        self.nodes: list = []  # (output, inputs, backward)
        self._done = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False


def recording() -> bool:
    return _ACTIVE is not None


def _out(data: np.ndarray, *inputs: Tensor) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    t.grad = None
    t.requires_grad = any(i.requires_grad for i in inputs)
    return t


def _emit(out: Tensor, inputs, backward) -> Tensor:
    if _ACTIVE is not None and out.requires_grad:
        _ACTIVE.nodes.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and g.shape[ax] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _note_kinks(pre: np.ndarray) -> None:
    if _KINKS is not None:
        _KINKS.append(pre > 0)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data + b.data, a, b)

    def bw(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return _emit(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data - b.data, a, b)

    def bw(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

    return _emit(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data * b.data, a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return _emit(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data / b.data, a, b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _out(x.data * c, x)

    def bw(g):
        return (g * c,)

    return _emit(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    out = _out(x.data * x.data, x)

    def bw(g):
        return (g * (2.0 * x.data),)

    return _emit(out, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out_d = np.sqrt(x.data)
    out = _out(out_d, x)

    def bw(g):
        return (g * (0.5 / out_d),)

    return _emit(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    _note_kinks(x.data)
    out = _out(np.maximum(x.data, 0), x)

    def bw(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: stable for any x and much faster than masked exp branches
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x: Tensor) -> Tensor:
    out = _out(_softplus_np(x.data), x)

    def bw(g):
        return (g * _sigmoid_np(x.data),)

    return _emit(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = _out(s, x)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None, activation: str = "none") -> Tensor:
    """activation(x @ W + b) for x of shape (din,) or (N, din); W is (din, dout)."""
    if x.data.shape[-1] != W.data.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape} vs W {W.data.shape}")
    pre = x.data @ W.data
    if b is not None:
        pre = pre + b.data
    if activation == "none":
        out_d = pre
    elif activation == "relu":
        _note_kinks(pre)
        out_d = np.maximum(pre, 0)
    elif activation == "softplus":
        out_d = _softplus_np(pre)
    else:
        raise ValueError(f"unknown activation '{activation}'")
    inputs = (x, W) if b is None else (x, W, b)
    out = _out(out_d, *inputs)

    def bw(g):
        if activation == "relu":
            gp = g * (pre > 0)
        elif activation == "softplus":
            gp = g * _sigmoid_np(pre)
        else:
            gp = g
        gx = gp @ W.data.T if x.requires_grad else None
        if x.data.ndim == 1:
            gW = np.outer(x.data, gp) if W.requires_grad else None
            gb = gp
        else:
            gW = x.data.T @ gp if W.requires_grad else None
            gb = gp.sum(axis=0)
        if b is None:
            return gx, gW
        return gx, gW, gb

    return _emit(out, inputs, bw)


def cross3(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cross product on (..., 3) tensors."""
    out = _out(np.cross(a.data, b.data), a, b)

    def bw(g):
        ga = _unbroadcast(np.cross(b.data, g), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, a.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bw)


def rotate_rows(x: Tensor, mats: np.ndarray) -> Tensor:
    """Per-row matrix apply out[m] = mats[m] @ x[m]; `mats` is a constant (M,3,3) array."""
    mats = np.asarray(mats, dtype=x.data.dtype)
    out = _out(np.einsum("mij,mj->mi", mats, x.data), x)

    def bw(g):
        return (np.einsum("mij,mi->mj", mats, g),)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _out(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), x)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape),)

    return _emit(out, (x,), bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    out = _out(np.asarray(x.data.mean(axis=axis)), x)
    n = x.data.size if axis is None else x.data.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape),)

    return _emit(out, (x,), bw)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    """Columns [j0:j1) of a 2D tensor."""
    out = _out(np.ascontiguousarray(x.data[:, j0:j1]), x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, j0:j1] = g
        return (gx,)

    return _emit(out, (x,), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x[idx] along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _out(x.data[idx], x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(out, (x,), bw)


def segment_sum(x: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Sum rows of x (M, D) into n bins given constant bin ids seg (M,)."""
    seg = np.asarray(seg, dtype=np.int64)
    out_d = np.zeros((n,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out_d, seg, x.data)
    out = _out(out_d, x)

    def bw(g):
        return (g[seg],)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes; backward sums 2x2 blocks."""
    out = _out(x.data.repeat(2, axis=-2).repeat(2, axis=-1), x)

    def bw(g):
        s = g.shape
        g4 = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return (g4.sum(axis=(-3, -1)),)

    return _emit(out, (x,), bw)


def conv3x3(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution with zero padding 1 on (C,H,W) or (P,C,H,W); k is (Cout,Cin,3,3)."""
    xd = x.data
    squeezed = xd.ndim == 3
    if squeezed:
        xd = xd[None]
    if xd.ndim != 4:
        raise ValueError(f"conv3x3 expects 3 or 4 axes, got {x.data.ndim}")
    cout, cin = k.data.shape[:2]
    if k.data.shape[2:] != (3, 3) or xd.shape[1] != cin:
        raise ValueError(f"kernel/channel mismatch: x {x.data.shape} vs k {k.data.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (P,C,H,W,3,3)
    out_d = np.einsum("pchwij,dcij->pdhw", win, k.data, optimize=True)
    out_d = out_d + b.data[:, None, None]
    if squeezed:
        out_d = out_d[0]
    out = _out(out_d, x, k, b)

    def bw(g):
        g4 = g[None] if squeezed else g
        gb = g4.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gk = np.einsum("pchwij,pdhw->dcij", win, g4, optimize=True) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = np.pad(g4, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))
            kf = np.ascontiguousarray(k.data[:, :, ::-1, ::-1])
            gx = np.einsum("pdhwij,dcij->pchw", gwin, kf, optimize=True)
            if squeezed:
                gx = gx[0]
        return gx, gk, gb

    return _emit(out, (x, k, b), bw)


def conv_residual_block(x: Tensor, k1: Tensor, b1: Tensor, k2: Tensor, b2: Tensor) -> Tensor:
    """relu(x + conv2(relu(conv1(x)))): two 3x3 convolutions at constant spatial size."""
    y = conv3x3(x, k1, b1)
    y = relu(y)
    y = conv3x3(y, k2, b2)
    return relu(add(x, y))


def _bilerp_coords(h: int, w: int, uv: np.ndarray):
    """Align-corners pixel coordinates for uv in [-1,1]^2 (out-of-range is clamped)."""
    u = np.clip(uv[..., 0], -1.0, 1.0)
    v = np.clip(uv[..., 1], -1.0, 1.0)
    px = (u + 1.0) * 0.5 * (w - 1)
    py = (v + 1.0) * 0.5 * (h - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    return x0, x1, y0, y1, fx, fy


def grid_sample(grids: Tensor, idx: np.ndarray, uv: np.ndarray) -> Tensor:
    """Bilinear lookups: grids (P,C,H,W), constant row ids idx (M,), constant uv (M,2) -> (M,C).

    Gradients flow into the grids only; uv is treated as data.
    """
    p, c, h, w = grids.data.shape
    idx = np.asarray(idx, dtype=np.int64)
    uv = np.asarray(uv, dtype=np.float64)
    x0, x1, y0, y1, fx, fy = _bilerp_coords(h, w, uv)
    dt = grids.data.dtype
    wx = fx[:, None].astype(dt)
    wy = fy[:, None].astype(dt)
    g = grids.data
    v00 = g[idx, :, y0, x0]
    v01 = g[idx, :, y0, x1]
    v10 = g[idx, :, y1, x0]
    v11 = g[idx, :, y1, x1]
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = _out(v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11, grids)
    ch = np.arange(c)[None, :]
    rows = idx[:, None]

    def bw(gr):
        gg = np.zeros_like(g)
        np.add.at(gg, (rows, ch, y0[:, None], x0[:, None]), gr * w00)
        np.add.at(gg, (rows, ch, y0[:, None], x1[:, None]), gr * w01)
        np.add.at(gg, (rows, ch, y1[:, None], x0[:, None]), gr * w10)
        np.add.at(gg, (rows, ch, y1[:, None], x1[:, None]), gr * w11)
        return (gg,)

    return _emit(out, (grids,), bw)


def bilinear_sample(grid: Tensor, uv) -> Tensor:
    """Sample one (C,H,W) grid at a single uv point in [-1,1]^2 -> (C,)."""
    c, h, w = grid.data.shape
    uv = np.asarray(uv, dtype=np.float64).reshape(1, 2)
    x0, x1, y0, y1, fx, fy = _bilerp_coords(h, w, uv)
    dt = grid.data.dtype
    wx, wy = dt.type(fx[0]), dt.type(fy[0])
    g = grid.data
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out_d = (g[:, y0[0], x0[0]] * w00 + g[:, y0[0], x1[0]] * w01
             + g[:, y1[0], x0[0]] * w10 + g[:, y1[0], x1[0]] * w11)
    out = _out(out_d, grid)

    def bw(gr):
        gg = np.zeros_like(g)
        gg[:, y0[0], x0[0]] += gr * w00
        gg[:, y0[0], x1[0]] += gr * w01
        gg[:, y1[0], x0[0]] += gr * w10
        gg[:, y1[0], x1[0]] += gr * w11
        return (gg,)

    return _emit(out, (grid,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backprop(tape: Tape, out: Tensor, leaves: list[Tensor] | None = None):
    """Reverse pass from scalar `out` over `tape`.

    When `leaves` is given, returns their gradients in order; leaves the output
    does not depend on get exact zeros.
    """
    if tape._done:
        raise TapeError("tape already consumed by a backward pass")
    if not tape.nodes:
        raise TapeError("backward without a recorded forward pass")
    if out.data.size != 1:
        raise TapeError(f"backprop needs a scalar output, got shape {out.data.shape}")
    tape._done = True
    for o, ins, _ in tape.nodes:
        o.grad = None
        for t in ins:
            t.grad = None
    if leaves:
        for t in leaves:
            t.grad = None
    out.grad = np.ones_like(out.data)
    for o, ins, bw in reversed(tape.nodes):
        g = o.grad
        if g is None:
            continue
        for t, gt in zip(ins, bw(g)):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt
    if leaves is not None:
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        return [t.grad for t in leaves]
    return None


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, params: list[Tensor], eps: float = 1e-3,
                      n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between central differences and the analytic gradient.

    Everything runs in float64. `f` takes the parameter list and must rebuild its
    computation deterministically on each call. Coordinates whose +/-eps probes land
    on opposite sides of a relu kink are excluded (the margin this enforces is the
    usual |preactivation| > O(eps) guard, detected directly as a sign flip).

    The relative error denominator is max(|fd|, |analytic|, 1e-4), so coordinates
    with near-zero gradients are measured on an absolute 1e-4 scale.
    """
    global _KINKS
    p64 = [param(t.data.astype(np.float64)) for t in params]
    with Tape() as tp:
        y = f(p64)
    grads = backprop(tp, y, leaves=p64)

    sizes = [t.size for t in p64]
    total = int(np.sum(sizes))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    m = min(n_coords, total)
    coords = np.sort(rng.choice(total, size=m, replace=False))

    def probe(ti, off, val):
        global _KINKS
        old = p64[ti].data.flat[off]
        p64[ti].data.flat[off] = val
        _KINKS = []
        try:
            yv = float(f(p64).data)
            sig = _KINKS
        finally:
            _KINKS = None
            p64[ti].data.flat[off] = old
        return yv, sig

    worst = 0.0
    for cflat in coords:
        ti = int(np.searchsorted(bounds, cflat, side="right") - 1)
        off = int(cflat - bounds[ti])
        center = float(p64[ti].data.flat[off])
        yp, sp = probe(ti, off, center + eps)
        ym, sm = probe(ti, off, center - eps)
        if len(sp) != len(sm) or any(not np.array_equal(a, b) for a, b in zip(sp, sm)):
            continue  # kink crossed between the probes
        fd = (yp - ym) / (2.0 * eps)
        an = float(grads[ti].flat[off])
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def rmsprop_step(p: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float,
                 decay: float = 0.99, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """One in-place RMSProp update: v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps)."""
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient in optimizer step")
    v *= decay
    v += (1.0 - decay) * np.square(g)
    p -= lr * g / (np.sqrt(v) + eps)
    return p, v


class RMSProp:
    """RMSProp over a fixed tensor list; per-tensor accumulator state starts at zero."""

    def __init__(self, tensors: list[Tensor], decay: float = 0.99, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.decay = float(decay)
        self.eps = float(eps)
        self.state = [np.zeros_like(t.data) for t in self.tensors]

    def step(self, lr: float) -> None:
        for t, v in zip(self.tensors, self.state):
            if t.grad is None:
                raise NumericError("optimizer step before gradients were computed")
            g = np.asarray(t.grad, dtype=t.data.dtype)
            rmsprop_step(t.data, g, v, lr, self.decay, self.eps)
