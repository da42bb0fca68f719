"""Dense float64 tensors with reverse-mode differentiation.

Every array in the pipeline lives in a ``Tensor``: a row-major float64
ndarray plus an optional gradient buffer. Operations record themselves on
the thread-local active :class:`Tape` (creation order is a topological
order), and ``backward`` replays the tape in reverse, accumulating
gradients with ``+=``. Gradients are cleared by the optimizer step, not
here.

Recording only happens inside a ``with tape():`` block; outside of one,
ops run plain forward passes, which keeps inference cheap.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "backward",
    "conv3d",
    "maxpool3d",
    "instance_norm",
    "activation",
    "relu",
    "sigmoid",
    "linear",
    "trilinear_sample",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "tmean",
    "tabs",
    "tlog",
    "clamp",
    "concat",
    "reshape",
    "permute",
    "amax",
]

_state = threading.local()


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; scalars are folded into the closure
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of op outputs; creation order doubles as topo order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextmanager
def tape():
    """Activate a fresh tape for the enclosed forward pass."""
    prev = _active_tape()
    t = Tape()
    _state.tape = t
    try:
        yield t
    finally:
        _state.tape = prev


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    t = _active_tape()
    rec = t is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=rec)
    if rec:
        out._parents = tuple(parents)
        out._backward = backward_fn
        t.record(out)
    return out


def backward(loss: Tensor, on: Tape) -> None:
    """Accumulate d(loss)/d(x) into .grad for everything loss depends on."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if len(on) == 0:
        raise ValueError("backward on an empty tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(on.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def _as_array(x, name: str) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        return _make(a.data + b.data, (a, b), bwd)

    c = float(b)

    def bwd_s(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _make(a.data + c, (a,), bwd_s)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-g)

        return _make(a.data - b.data, (a, b), bwd)

    c = float(b)

    def bwd_s(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _make(a.data - c, (a,), bwd_s)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g * bd)
            if b.requires_grad:
                b.accumulate_grad(g * ad)

        return _make(ad * bd, (a, b), bwd)

    return scale(a, float(b))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(a.data * c, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    shp = a.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(shp, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    shp = a.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(shp, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), bwd)


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)  # subgradient 0 at exactly 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _make(np.abs(a.data), (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / ad)

    return _make(np.log(ad), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    keep = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of empty sequence")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t.accumulate_grad(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _make(a.data.reshape(tuple(shape)), (a,), bwd)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def amax(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first argmax per slot."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shp = a.shape

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros(shp)
            np.put_along_axis(buf, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis=axis)
            a.accumulate_grad(buf)

    return _make(np.squeeze(out, axis=axis), (a,), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval even where float64 saturates
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_raw(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the trailing dimension: y = x @ W.T + b."""
    f_out, f_in = weight.shape
    if x.shape[-1] != f_in:
        raise ValueError(
            f"linear: trailing dim {x.shape[-1]} does not match weight F_in {f_in}")
    if bias.shape != (f_out,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({f_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, f_in)
    y2 = x2 @ weight.data.T + bias.data

    def bwd(g):
        g2 = g.reshape(-1, f_out)
        if x.requires_grad:
            x.accumulate_grad((g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            weight.accumulate_grad(g2.T @ x2)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))

    return _make(y2.reshape(*lead, f_out), (x, weight, bias), bwd)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """3D cross-correlation, stride 1.

    x: (C_in, D, H, W); kernel: (C_out, C_in, k, k, k); bias: (C_out,).
    Output spatial size is D + 2*padding - k + 1 per axis.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv3d input must be (C,D,H,W), got {x.shape}")
    c_out, c_in, k, k2, k3 = kernel.shape
    if not (k == k2 == k3):
        raise ValueError(f"conv3d kernel must be cubic, got {kernel.shape}")
    if k % 2 != 1:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if padding < 0:
        raise ValueError("conv3d padding must be >= 0")
    if x.shape[0] != c_in:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[0]} channels, "
            f"kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv3d bias shape {bias.shape} != ({c_out},)")

    p = padding
    xpad = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xpad, (k, k, k), axis=(1, 2, 3))
    # win: (C_in, D', H', W', k, k, k)
    out = np.tensordot(kernel.data, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += bias.data[:, None, None, None]
    d_in = x.shape[1:]

    def bwd(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2, 3)))
        if kernel.requires_grad:
            dp, hp, wp = g.shape[1:]
            win2 = np.lib.stride_tricks.sliding_window_view(
                xpad, (dp, hp, wp), axis=(1, 2, 3))
            # win2: (C_in, k, k, k, D', H', W')
            kernel.accumulate_grad(
                np.tensordot(g, win2, axes=([1, 2, 3], [4, 5, 6])))
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0),) + ((k - 1, k - 1),) * 3)
            gwin = np.lib.stride_tricks.sliding_window_view(
                gpad, (k, k, k), axis=(1, 2, 3))
            kflip = kernel.data[:, :, ::-1, ::-1, ::-1]
            dxpad = np.tensordot(gwin, kflip, axes=([0, 4, 5, 6], [0, 2, 3, 4]))
            dxpad = np.moveaxis(dxpad, -1, 0)
            if p:
                dxpad = dxpad[:, p:p + d_in[0], p:p + d_in[1], p:p + d_in[2]]
            x.accumulate_grad(np.ascontiguousarray(dxpad))

    return _make(np.ascontiguousarray(out), (x, kernel, bias), bwd)


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first max in scan order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool3d input must be (C,D,H,W), got {x.shape}")
    c, d, h, w = x.shape
    m = window
    if d % m or h % m or w % m:
        raise ValueError(
            f"maxpool3d: dims {(d, h, w)} not divisible by window {m}")
    xr = x.data.reshape(c, d // m, m, h // m, m, w // m, m)
    xt = np.ascontiguousarray(xr.transpose(0, 1, 3, 5, 2, 4, 6))
    flat = xt.reshape(c, d // m, h // m, w // m, m ** 3)
    idx = np.argmax(flat, axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if x.requires_grad:
            buf = np.zeros_like(flat)
            np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
            buf = buf.reshape(c, d // m, h // m, w // m, m, m, m)
            dx = buf.transpose(0, 1, 4, 2, 5, 3, 6).reshape(c, d, h, w)
            x.accumulate_grad(np.ascontiguousarray(dx))

    return _make(np.ascontiguousarray(out), (x,), bwd)


def instance_norm(x: Tensor, eps: float) -> Tensor:
    """Per-channel normalization over the spatial axes of (C,D,H,W)."""
    if eps <= 0:
        raise ValueError("instance_norm eps must be > 0")
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm input must be (C,D,H,W), got {x.shape}")
    axes = (1, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        if x.requires_grad:
            gm = g.mean(axis=axes, keepdims=True)
            gx = (g * xhat).mean(axis=axes, keepdims=True)
            x.accumulate_grad(inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), bwd)


def trilinear_sample(grid: Tensor, points) -> Tensor:
    """Sample (C,D,H,W) features at normalized points (N,3) in [0,1]^3.

    Grid values sit at cell centers ((i+0.5)/D along the first spatial
    axis, and so on); queries are clamped into the unit cube and indices
    clamped at the border, so out-of-range queries extrapolate constantly.
    Differentiable w.r.t. the grid values; points are plain coordinates.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N,3), got {pts.shape}")
    c, d, h, w = grid.shape
    pts = np.clip(pts, 0.0, 1.0)

    def axis_coords(p, n):
        u = p * n - 0.5
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        return np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1), f

    ix0, ix1, fx = axis_coords(pts[:, 0], d)
    iy0, iy1, fy = axis_coords(pts[:, 1], h)
    iz0, iz1, fz = axis_coords(pts[:, 2], w)

    corners = []
    for cx, ii in ((0, ix0), (1, ix1)):
        wx = fx if cx else 1.0 - fx
        for cy, jj in ((0, iy0), (1, iy1)):
            wy = fy if cy else 1.0 - fy
            for cz, kk in ((0, iz0), (1, iz1)):
                wz = fz if cz else 1.0 - fz
                corners.append((wx * wy * wz, ii, jj, kk))

    out = np.zeros((pts.shape[0], c))
    for wgt, ii, jj, kk in corners:
        out += wgt[:, None] * grid.data[:, ii, jj, kk].T

    def bwd(g):
        if grid.requires_grad:
            dg = np.zeros((d * h * w, c))
            for wgt, ii, jj, kk in corners:
                lin = (ii * h + jj) * w + kk
                np.add.at(dg, lin, wgt[:, None] * g)
            grid.accumulate_grad(np.ascontiguousarray(dg.T.reshape(c, d, h, w)))

    return _make(out, (grid,), bwd)
