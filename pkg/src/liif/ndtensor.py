"""Minimal reverse-mode differentiable arrays on top of numpy.

The op set is deliberately small: it covers exactly what the encoder,
the decoding MLP and the L1 loss need (dense matmul, stride-1 zero-padded
conv2d, relu, add with bias-style broadcasting, scalar scale, concat,
row gather/slice, 3x3 neighborhood unfolding, elementwise mul and axis
sums).  Graphs are built per step and discarded after ``backward``.

Arrays are float32 by default; float64 inputs are kept as float64 so
tests can run numerically sensitive checks in a 64-bit shadow.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf, or an update lacks a gradient."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward on a non-scalar)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    # One-pass probe: any NaN/Inf makes the float64 sum non-finite
    # (Inf + -Inf -> NaN), and finite float32 data cannot overflow it.
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NumericError(f"non-finite values produced by {what}")


class OpRecord:
    """Producer entry: op name, input tensors and the gradient closure."""

    __slots__ = ("name", "inputs", "grad_fn")

    def __init__(self, name, inputs, grad_fn):
        self.name = name
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "producer")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.producer: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


def _result(data: np.ndarray, name: str, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out.producer = OpRecord(name, inputs, grad_fn) if out.requires_grad else None
    return out


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Reduce a broadcasted gradient back to the operand's shape.
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- forward ops


def add(a, b) -> Tensor:
    """Elementwise sum; broadcasting limited to bias-add style shapes."""
    a, b = _tensor(a), _tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot combine {a.shape} with {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, "add", (a, b), grad_fn)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar."""
    a = _tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.dtype)

    def grad_fn(g):
        return (g * np.asarray(s, dtype=a.dtype),)

    return _result(data, "scale", (a,), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product (used for constant per-row weights)."""
    a, b = _tensor(a), _tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot combine {a.shape} with {b.shape}") from exc

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, "mul", (a, b), grad_fn)


def relu(a) -> Tensor:
    a = _tensor(a)
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return _result(data, "relu", (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(data, "matmul", (a, b), grad_fn)


def _im2col(x: np.ndarray, kh: int, kw: int, ph: int, pw: int):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    oh, ow = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _conv_forward(x: np.ndarray, k: np.ndarray, ph: int, pw: int):
    b = x.shape[0]
    o, _, kh, kw = k.shape
    cols, oh, ow = _im2col(x, kh, kw, ph, pw)
    out = cols @ k.reshape(o, -1).T
    return out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2), cols


def conv2d(x, k, padding: int | tuple[int, int]) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``x`` is (B, Cin, H, W), ``k`` is (Cout, Cin, kh, kw) with odd kernel
    extents.  ``padding`` pixels of zeros are added on each side per axis.
    """
    x, k = _tensor(x), _tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and k, got {x.shape} and {k.shape}")
    o, ci, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {ci}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    data, cols = _conv_forward(x.data, k.data, ph, pw)

    def grad_fn(g):
        b, _, oh, ow = g.shape
        gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gk = (gm.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            kt = np.ascontiguousarray(k.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx, _ = _conv_forward(g, kt, kh - 1 - ph, kw - 1 - pw)
        return gx, gk

    return _result(data, "conv2d", (x, k), grad_fn)


def concat(tensors, axis: int) -> Tensor:
    ts = tuple(_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)] if t.requires_grad else None)
        return tuple(grads)

    return _result(data, "concat", ts, grad_fn)


def gather_rows(x, idx) -> Tensor:
    """Select rows of a 2-d tensor; duplicates accumulate in the gradient."""
    x = _tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got {x.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows expects a 1-d integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    data = x.data[idx]

    def grad_fn(g):
        # Scatter-add via a sparse selection matrix; much faster than np.add.at.
        n = idx.shape[0]
        sel = scipy.sparse.csr_matrix(
            (np.ones(n, dtype=g.dtype), idx, np.arange(n + 1)), shape=(n, x.shape[0])
        )
        return (np.asarray(sel.T @ g),)

    return _result(data, "gather_rows", (x,), grad_fn)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_rows expects a 2-d tensor, got {x.shape}")
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {x.shape[0]} rows")
    data = x.data[start:stop]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _result(data, "slice_rows", (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = _tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _result(data, "reshape", (x,), grad_fn)


def transpose(x, axes) -> Tensor:
    x = _tensor(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv),)

    return _result(data, "transpose", (x,), grad_fn)


def axis_sum(x, axis: int) -> Tensor:
    x = _tensor(x)
    data = x.data.sum(axis=axis)

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),)

    return _result(data, "axis_sum", (x,), grad_fn)


def unfold3x3(x) -> Tensor:
    """Concatenate each position's 3x3 neighborhood along the channel axis.

    ``x`` is (H, W, D) or (B, H, W, D); output depth is 9D with neighbor
    blocks ordered row-major over (dr, dc) in {-1, 0, 1}^2 and zero vectors
    past the borders.
    """
    x = _tensor(x)
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"unfold3x3 expects (H, W, D) or (B, H, W, D), got {x.shape}")
    squeeze = x.data.ndim == 3
    arr = x.data[None] if squeeze else x.data
    b, h, w, d = arr.shape
    padded = np.zeros((b, h + 2, w + 2, d), dtype=arr.dtype)
    padded[:, 1:-1, 1:-1] = arr
    blocks = [
        padded[:, 1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        for dr in (-1, 0, 1)
        for dc in (-1, 0, 1)
    ]
    data = np.concatenate(blocks, axis=3)
    if squeeze:
        data = data[0]

    def grad_fn(g):
        ga = g[None] if squeeze else g
        gp = np.zeros_like(padded)
        for block, (dr, dc) in enumerate((r, c) for r in (-1, 0, 1) for c in (-1, 0, 1)):
            gp[:, 1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] += ga[
                ..., block * d : (block + 1) * d
            ]
        gx = gp[:, 1:-1, 1:-1]
        return (gx[0] if squeeze else gx,)

    return _result(data, "unfold3x3", (x,), grad_fn)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error, reduced to a scalar."""
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.abs(diff).mean(dtype=pred.dtype).reshape(())

    def grad_fn(g):
        s = g * np.sign(diff) / diff.size
        gp = s if pred.requires_grad else None
        gt = -s if target.requires_grad else None
        return gp, gt

    return _result(data, "l1_loss", (pred, target), grad_fn)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep filling ``grad`` on every reachable parameter."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor with no graph (requires_grad is False)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.producer is not None:
            for parent in node.producer.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    adopted = {id(loss.grad)}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if g.dtype != t.data.dtype:
            g = g.astype(t.data.dtype)
        if t.grad is None:
            if g.base is not None or not g.flags["OWNDATA"] or id(g) in adopted:
                g = g.copy()
            t.grad = g
            adopted.add(id(g))
        else:
            t.grad += g

    for node in reversed(topo):
        rec = node.producer
        if rec is None:
            continue
        grads = rec.grad_fn(node.grad)
        for parent, g in zip(rec.inputs, grads):
            if g is not None and parent.requires_grad:
                accumulate(parent, np.asarray(g))


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    """Per-parameter Adam moments and step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_step(param: Tensor, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; clears the gradient afterwards."""
    if param.grad is None:
        raise NumericError("adam_step: parameter has no gradient")
    if state.m.shape != param.data.shape:
        raise ShapeError(
            f"adam_step: state shape {state.m.shape} does not match parameter {param.shape}"
        )
    g = param.grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)
    param.grad = None
