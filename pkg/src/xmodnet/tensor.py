"""Small dense-tensor library with reverse-mode automatic differentiation.

Only the operations the few-shot models need are provided. Arrays are
channels-last (``[batch, height, width, channels]``) and float32 unless the
caller builds tensors from float64 data, which is how gradient checking runs
in double precision.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Raise on NaN/Inf produced by a forward op.
CHECK_FINITE = True


class ShapeError(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside this block (per thread)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable] = None,
        op: str = "",
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires_grad,
        dtype=data.dtype,
        _parents=parents if requires_grad else (),
        _backward=backward_fn if requires_grad else None,
        op=op,
    )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape / backward


@dataclass
class Tape:
    """Topologically ordered record of the ops that produced ``output``."""

    output: Tensor
    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output=output, nodes=order)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Intermediate gradients are kept local to the call, so calling this twice
    on the same graph adds exactly the same amount to the leaves again.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def tabs(a: Tensor) -> Tensor:
    # d|x|/dx at 0 is taken as 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    mask = a.data > floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return _make(out, (a,), lambda g: (g * mask,), "clip_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Row-major flatten of everything but the leading batch axis."""
    return reshape(a, (a.shape[0], -1))


def cast(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input's dtype."""
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(a.dtype),), "cast")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def index(a: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(a.data[idx]), (a,), bw, "index")


def take(a: Tensor, rows) -> Tensor:
    """Gather rows along axis 0 (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.intp)

    def bw(g):
        # scatter-add as a one-hot matmul; much faster than np.add.at here
        onehot = np.zeros((a.shape[0], rows.shape[0]), dtype=g.dtype)
        onehot[rows, np.arange(rows.shape[0])] = 1.0
        return ((onehot @ g.reshape(rows.shape[0], -1)).reshape(a.shape),)

    return _make(a.data[rows], (a,), bw, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x of shape [B, D]."""
    if x.ndim != 2 or weight.shape[0] != x.shape[1] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine shapes {x.shape}, {weight.shape}, {bias.shape}")
    return add(matmul(x, weight), bias)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    split = a.shape[-1]

    def bw(g):
        return g[..., :split], g[..., split:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bw, "concat")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolutional-network ops


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # [B,H,W,C,3,3]
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero "same" padding, plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,H,W,C], got {x.shape}")
    if kernels.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d kernels must be 3x3, got {kernels.shape}")
    b, h, w, cin = x.shape
    if kernels.shape[2] != cin:
        raise ShapeError(f"input has {cin} channels, kernels expect {kernels.shape[2]}")
    cout = kernels.shape[3]
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    cols = _im2col(x.data)
    kmat = kernels.data.reshape(9 * cin, cout)
    out = (cols @ kmat + bias.data).reshape(b, h, w, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient is a same-padded correlation with the flipped, transposed kernel
            flipped = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gx = (_im2col(g) @ flipped).reshape(x.shape)
        return gx, gk, gb

    return _make(out, (x, kernels, bias), bw, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.mean = (BN_MOMENTUM * self.mean + (1 - BN_MOMENTUM) * batch_mean).astype(self.mean.dtype)
        self.var = (BN_MOMENTUM * self.var + (1 - BN_MOMENTUM) * batch_var).astype(self.var.dtype)
        self.updates += 1

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.updates)


BN_MODES = ("train", "eval", "batch")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    state: Optional[RunningStats] = None,
) -> Tensor:
    """Per-channel batch normalization over the B, H, W axes.

    ``train`` normalizes with batch statistics and updates ``state``;
    ``batch`` does the same without touching ``state``; ``eval`` uses the
    running statistics in ``state``.
    """
    if mode not in BN_MODES:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    axes = (0, 1, 2)
    n = x.size // c

    if mode == "eval":
        if state is None or state.updates == 0:
            raise RuntimeError("batch_norm eval mode needs running statistics that have been updated")
        mu = state.mean.astype(x.dtype)
        inv = (1.0 / np.sqrt(state.var + BN_EPS)).astype(x.dtype)
        xhat = (x.data - mu) * inv
        out = gamma.data * xhat + beta.data

        def bw_eval(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make(out, (x, gamma, beta), bw_eval, "batch_norm")

    flat = x.data.reshape(n, c)
    # statistics accumulated in float64, then cast back
    mu64 = flat.mean(axis=0, dtype=np.float64)
    var64 = np.square(flat - mu64).mean(axis=0)
    mu, var = mu64.astype(x.dtype), var64.astype(x.dtype)
    centered = flat - mu
    inv = (1.0 / np.sqrt(var64 + BN_EPS)).astype(x.dtype)
    xhat = centered * inv
    out = (gamma.data * xhat + beta.data).reshape(x.shape)
    if mode == "train" and state is not None:
        state.update(mu, var)

    def bw(g):
        g = g.reshape(n, c)
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * np.einsum("nc,nc->c", gxhat, xhat))
        return gx.reshape(x.shape), np.einsum("nc,nc->c", g, xhat), g.sum(axis=0)

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def max_pool_2x2(x: Tensor, truncate: bool = False) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd spatial extents raise unless ``truncate`` is set, in which case the
    trailing row/column is dropped. Gradient goes to the first maximal element
    of each window (row-major order).
    """
    b, h, w, c = x.shape
    if (h % 2 or w % 2) and not truncate:
        raise ShapeError(f"max_pool_2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"max_pool_2x2 input too small: {h}x{w}")
    corners = [
        x.data[:, dy : 2 * h2 : 2, dx : 2 * w2 : 2, :] for dy in (0, 1) for dx in (0, 1)
    ]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def bw(g):
        full = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = corners[k] == out
            hit &= ~taken
            taken |= hit
            full[:, dy : 2 * h2 : 2, dx : 2 * w2 : 2, :] = g * hit
        return (full,)

    return _make(out, (x,), bw, "max_pool_2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,H,W,C] -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [B,H,W,C], got {x.shape}")
    return mean(x, axis=(1, 2))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    indices: Optional[Iterable[int]] = None,
    oracle_dtype=None,
) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is perturbed in place (and restored), so it may be a parameter that
    ``fn`` reads through a closure. ``indices`` restricts the check to a set
    of flat positions. With ``oracle_dtype`` (e.g. float64) the finite
    differences are taken with ``x`` promoted to that dtype, which keeps
    round-off of a float32 graph out of the numeric side. Relative error per
    element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    saved_flag, saved_grad, saved_data = x.requires_grad, x.grad, x.data
    x.requires_grad = True
    x.grad = None
    try:
        loss = fn(x)
        if loss.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        backward(loss)
        analytic = (np.zeros_like(x.data) if x.grad is None else x.grad).reshape(-1).astype(np.float64)

        x.requires_grad = False
        x.data = saved_data.astype(oracle_dtype or saved_data.dtype, copy=True)
        flat = x.data.reshape(-1)
        if indices is None:
            indices = range(flat.size)
        worst = 0.0
        with no_grad():
            for i in indices:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(fn(x).data)
                flat[i] = orig - eps
                down = float(fn(x).data)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[i]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        return float(worst)
    finally:
        x.requires_grad, x.grad, x.data = saved_flag, saved_grad, saved_data
