"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every operation records its parents and a
backward closure, so any scalar built from tensor ops can be differentiated
exactly with :func:`gradient` and verified against central finite differences
with :func:`grad_check`. A bias-corrected Adam step (:func:`adam_update`)
operates on named parameter dictionaries.

Design notes:
- float64 throughout; gradient checks dominate correctness testing.
- every op output is checked for NaN/Inf and reports the offending node.
- relu subgradient at 0 is 0; max/maxpool ties route to the lowest index.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "GradientError",
    "no_grad",
    "tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "reduce_max",
    "reduce_mean",
    "reduce_sum",
    "concat",
    "reshape",
    "transpose",
    "logsumexp",
    "squared_difference",
    "lstm_step",
    "gradient",
    "grad_check",
    "AdamState",
    "adam_update",
]


class NonFiniteError(ArithmeticError):
    """A tensor op produced (or was given) NaN/Inf values."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested op."""


class GradientError(ValueError):
    """The differentiation request is invalid (e.g. non-scalar root)."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # NaN/Inf both poison a sum, so one reduction covers the whole array.
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite values produced by node '{op}'")


class Tensor:
    """A dense float64 array, optionally a node in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return narrow(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # t.grad is always an owned buffer, so accumulation can be in place.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so g matches the original operand shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, "sub", (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, "neg", (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, "div", (a, b), backward)


def squared_difference(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    data = diff * diff

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(2.0 * g * diff, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-2.0 * g * diff, b.data.shape))

    return _make(data, "squared_difference", (a, b), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    active = a.data > 0.0
    data = a.data * active

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * active)

    return _make(data, "relu", (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _make(data, "sigmoid", (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - data * data))

    return _make(data, "tanh", (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _make(data, "exp", (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(data, "log", (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / data)

    return _make(data, "sqrt", (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# Convolution / pooling
# ---------------------------------------------------------------------------

def _conv_pad(h: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Returns (pad_before, pad_after, out_size) for one spatial dimension."""
    if padding == "valid":
        if h < k:
            raise ShapeError(f"input size {h} smaller than kernel {k} with valid padding")
        out = (h - k) // stride + 1
        return 0, 0, out
    if padding == "same":
        out = -(-h // stride)  # ceil
        total = max((out - 1) * stride + k - h, 0)
        before = total // 2
        return before, total - before, out
    raise ValueError(f"unknown padding {padding!r} (expected 'valid' or 'same')")


def im2col(x_data: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    """Column matrix (B*OH*OW, C*kh*kw) for a (B,C,H,W) array; reusable for
    conv2d on inputs that do not need gradients (e.g. raw image batches)."""
    B, C, H, W = x_data.shape
    pt, pb, OH = _conv_pad(H, kh, stride, padding)
    pl, pr, OW = _conv_pad(W, kw, stride, padding)
    xp = np.pad(x_data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x_data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (B,C,OH,OW,kh,kw)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * OH * OW, C * kh * kw)


def conv2d(x, w, bias=None, stride: int = 1, padding: str = "valid",
           cols: np.ndarray | None = None) -> Tensor:
    """2-D cross-correlation: x (B,C,H,W) with filters w (O,C,kh,kw).

    ``cols`` may carry a precomputed :func:`im2col` matrix for ``x`` (only
    valid when x does not require gradients), which avoids rebuilding it for
    inputs that recur across many training steps.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/filters, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {C}, filters {Cw}")
    pt, pb, OH = _conv_pad(H, kh, stride, padding)
    pl, pr, OW = _conv_pad(W, kw, stride, padding)
    if cols is None:
        cols = im2col(x.data, kh, kw, stride, padding)
    elif x.requires_grad:
        raise ShapeError("precomputed cols only allowed for non-gradient inputs")
    wmat = w.data.reshape(O, C * kh * kw)
    out = np.ascontiguousarray(
        (cols @ wmat.T).reshape(B, OH, OW, O).transpose(0, 3, 1, 2))

    b_t = _as_tensor(bias) if bias is not None else None
    if b_t is not None:
        if b_t.data.shape != (O,):
            raise ShapeError(f"conv2d bias must have shape ({O},), got {b_t.data.shape}")
        out += b_t.data.reshape(1, O, 1, 1)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * OH * OW, O)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ cols).reshape(O, C, kh, kw))
        if b_t is not None and b_t.requires_grad:
            _accumulate(b_t, gmat.sum(axis=0))
        if x.requires_grad:
            # one transpose up front keeps the scatter loop on contiguous blocks
            gcols = np.ascontiguousarray(
                (gmat @ wmat).reshape(B, OH, OW, C, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros((B, C, H + pt + pb, W + pl + pr))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + OH * stride:stride, j:j + OW * stride:stride] += \
                        gcols[:, :, i, j]
            gx = gxp[:, :, pt:pt + H, pl:pl + W]
            _accumulate(x, gx)

    parents = (x, w) if b_t is None else (x, w, b_t)
    return _make(out, "conv2d", parents, backward)


def maxpool2d(x, pool: int) -> Tensor:
    """Non-overlapping pool x pool max pooling; ties go to the lowest index."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % pool or W % pool:
        raise ShapeError(f"maxpool2d size {pool} does not divide spatial dims {H}x{W}")
    OH, OW = H // pool, W // pool
    tiled = x.data.reshape(B, C, OH, pool, OW, pool).transpose(0, 1, 2, 4, 3, 5)
    flat = tiled.reshape(B, C, OH, OW, pool * pool)
    idx = np.argmax(flat, axis=-1)  # first max = lowest (row, col) in the window
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(B, C, OH, OW, pool, pool).transpose(0, 1, 2, 4, 3, 5)
            _accumulate(x, gx.reshape(B, C, H, W))

    return _make(out, "maxpool2d", (x,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce_max(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient flows to the first (lowest-index) arg-max."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gexp = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, np.expand_dims(idx, axis), gexp, axis=axis)
            _accumulate(x, gx)

    return _make(data, "max", (x,), backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.data.shape))
            else:
                gexp = g if keepdims else np.expand_dims(g, axis)
                _accumulate(x, np.broadcast_to(gexp, x.data.shape))

    return _make(data, "sum", (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if x.requires_grad:
            if axis is None:
                _accumulate(x, np.broadcast_to(g / count, x.data.shape))
            else:
                gexp = g if keepdims else np.expand_dims(g, axis)
                _accumulate(x, np.broadcast_to(gexp / count, x.data.shape))

    return _make(data, "mean", (x,), backward)


def logsumexp(x, axis=None, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(x))) with softmax gradient."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    data = np.log(total) + m
    soft = shifted / total
    if not keepdims:
        if axis is None:
            data = data.reshape(())
        else:
            data = np.squeeze(data, axis=axis)

    def backward(g):
        if x.requires_grad:
            if keepdims or axis is None:
                gexp = np.asarray(g).reshape(data.shape if keepdims else (1,) * x.data.ndim)
            else:
                gexp = np.expand_dims(g, axis)
            _accumulate(x, gexp * soft)

    return _make(data, "logsumexp", (x,), backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.data.shape))

    return _make(data, "reshape", (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.transpose(g, inv))

    return _make(data, "transpose", (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(data, "concat", tuple(ts), backward)


def narrow(x, index) -> Tensor:
    """Basic slicing/indexing as a differentiable op."""
    x = _as_tensor(x)
    data = x.data[index]

    def backward(g):
        if x.requires_grad:
            # scatter-add straight into the parent buffer: repeated slices of
            # one big tensor (e.g. per-timestep reads) stay cheap
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[index] += g

    return _make(data, "slice", (x,), backward)


def lstm_step(x, state, wx, wh, b, mask: np.ndarray | None = None) -> Tensor:
    """One fused recurrent step: input (B, I), packed state [h | c] (B, 2H),
    weights, bias, optional (B, 1) validity mask; returns the next packed
    state.

    Gate layout is [input, forget, output, cell] so the three sigmoids run as
    one call on a contiguous block. Where the mask is 0 the previous state is
    carried through unchanged, keeping trailing padding out of valid
    positions in either scan direction. Fusing affine transform and cell into
    one node keeps the per-timestep graph small; the backward closure is the
    standard hand-derived cell backprop.
    """
    x, state, wx, wh, b = (_as_tensor(t) for t in (x, state, wx, wh, b))
    B, I = x.shape
    H = wh.shape[0]
    if wx.shape != (I, 4 * H) or wh.shape != (H, 4 * H) or b.shape != (4 * H,) \
            or state.shape != (B, 2 * H):
        raise ShapeError(
            f"lstm_step shapes inconsistent: x {x.shape}, state {state.shape}, "
            f"wx {wx.shape}, wh {wh.shape}, b {b.shape}")
    h_prev = state.data[:, :H]
    c_prev = state.data[:, H:]
    gates = x.data @ wx.data
    gates += h_prev @ wh.data
    gates += b.data
    sig = 1.0 / (1.0 + np.exp(-gates[:, :3 * H]))
    i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
    z = np.tanh(gates[:, 3 * H:])
    c_new = f * c_prev + i * z
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        keep = 1.0 - mask
        out = np.concatenate([mask * h_new + keep * h_prev,
                              mask * c_new + keep * c_prev], axis=1)
    else:
        out = np.concatenate([h_new, c_new], axis=1)

    def backward(g):
        gh_next, gc_next = g[:, :H], g[:, H:]
        if mask is not None:
            gh_new = mask * gh_next
            gc_new = mask * gc_next
            gh_prev = (1.0 - mask) * gh_next
            gc_prev = (1.0 - mask) * gc_next
        else:
            gh_new, gc_new = gh_next, np.array(gc_next)
            gh_prev = np.zeros_like(gh_next)
            gc_prev = np.zeros_like(gc_next)
        go = gh_new * tc
        gc_new = gc_new + gh_new * o * (1.0 - tc * tc)
        gc_prev = gc_prev + gc_new * f
        dgates = np.concatenate([
            gc_new * z * i * (1.0 - i),
            gc_new * c_prev * f * (1.0 - f),
            go * o * (1.0 - o),
            gc_new * i * (1.0 - z * z),
        ], axis=1)
        if wx.requires_grad:
            _accumulate(wx, x.data.T @ dgates)
        if wh.requires_grad:
            _accumulate(wh, h_prev.T @ dgates)
        if b.requires_grad:
            _accumulate(b, dgates.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, dgates @ wx.data.T)
        if state.requires_grad:
            gh_prev = gh_prev + dgates @ wh.data.T
            _accumulate(state, np.concatenate([gh_prev, gc_prev], axis=1))

    return _make(out, "lstm_step", (x, state, wx, wh, b), backward)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(output: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Exact reverse-mode gradients of a scalar output w.r.t. requested leaves."""
    wrt = list(wrt)
    if output.data.shape != ():
        raise GradientError(f"gradient root must be scalar, got shape {output.shape}")
    for t in wrt:
        if not t.requires_grad:
            raise GradientError("requested leaf does not have requires_grad set")
    order = _topo_order(output)
    for node in order:
        node.grad = None
    for t in wrt:
        t.grad = None
    output.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    result = {}
    for t in wrt:
        result[t] = t.grad if t.grad is not None else np.zeros_like(t.data)
    # Drop intermediate grads so repeated backward passes start clean.
    for node in order:
        if node._backward is not None:
            node.grad = None
    return result


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar expression from the current values of ``params``.
    With ``max_coords_per_param`` set, only that many randomly chosen
    coordinates per parameter are probed (the analytic side is always full).
    Relative error is |analytic - numeric| / max(1, |analytic|).
    """
    params = list(params)
    out = fn()
    grads = gradient(out, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.asarray(grads[p]).reshape(-1)
        n = p.data.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            # index element-wise so perturbation works for any memory layout
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            hi = float(fn().data)
            p.data[idx] = orig - h
            lo = float(fn().data)
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus hyperparameters."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.beta1 <= 0 or self.beta2 <= 0 or self.epsilon <= 0:
            raise ValueError("Adam hyperparameters must be positive")
        if self.step < 0:
            raise ValueError("Adam step counter must be >= 0")


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns updated params and state."""
    t = state.step + 1
    new_m, new_v, new_params = {}, {}, {}
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = state.beta1 * m + (1.0 - state.beta1) * g if m is not None else (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g) if v is not None else (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        new_params[name] = p - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
        new_m[name] = m
        new_v[name] = v
    next_state = AdamState(learning_rate=state.learning_rate, beta1=state.beta1,
                           beta2=state.beta2, epsilon=state.epsilon, step=t,
                           m=new_m, v=new_v)
    return new_params, next_state
