"""Small reverse-mode autodiff engine on top of numpy.

Every differentiable primitive records a node on a :class:`Tape`. A single
call to :func:`backward` replays the tape in reverse and then marks it
consumed, so each forward pass supports exactly one backward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

CE_PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, reused tape, ...)."""


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []
# used when no tape context is active; replaced once consumed
_DEFAULT_TAPE = Tape()


class _Node:
    __slots__ = ("tape", "out", "inputs", "backward")

    def __init__(self, tape, out, inputs, backward):
        self.tape = tape
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense n-d array with an optional gradient.

    ``data`` is a numpy array (float64 or float32, integer for index tensors).
    Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if requires_grad and arr.dtype.kind != "f":
            raise TypeError("only floating point tensors can require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by Python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _active_tape(inputs: Sequence[Tensor]) -> Tape:
    tape = None
    for t in inputs:
        if t._node is not None:
            if tape is None:
                tape = t._node.tape
            elif t._node.tape is not tape:
                raise TapeError("operands were recorded on different tapes")
    if tape is not None:
        if tape.consumed:
            raise TapeError("cannot extend a tape that has already been consumed by backward()")
        return tape
    if _TAPE_STACK:
        return _TAPE_STACK[-1]
    global _DEFAULT_TAPE
    if _DEFAULT_TAPE.consumed:
        _DEFAULT_TAPE = Tape()
    return _DEFAULT_TAPE


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        tape = _active_tape(inputs)
        out.requires_grad = True
        node = _Node(tape, out, tuple(inputs), backward)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward)


elementwise_mul = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, n) as a single 2-d product
    k = a.shape[-1]
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def cast(a, dtype) -> Tensor:
    """Change floating point precision; the gradient is cast back."""
    a = as_tensor(a)
    src = a.dtype
    if src == np.dtype(dtype):
        return a
    return _record(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def embedding_lookup(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices.data if isinstance(indices, Tensor) else indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("embedding indices must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.data[idx], (table,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    Target probabilities are floored at ``CE_PROB_FLOOR`` before the log; the
    gradient through a floored entry is zero.
    """
    logits = as_tensor(logits)
    tgt = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if logits.shape[:-1] != tgt.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = tgt.reshape(-1)
    count = t.size
    if count == 0:
        raise ShapeError("cross_entropy of an empty batch")
    z = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(count)
    pt = p[rows, t]
    clamped = pt < CE_PROB_FLOOR
    nll = -np.log(np.maximum(pt, CE_PROB_FLOOR))
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        grad = p.copy()
        grad[rows, t] -= 1.0
        grad[clamped] = 0.0
        return ((grad * (g / count)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _record(out, (logits,), backward)


def sum_of_squares(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.asarray((a.data * a.data).sum()), (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Accumulates into ``.grad`` of every leaf that requires grad and returns a
    map leaf -> gradient. Leaves with ``requires_grad=False`` never get one.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss was not produced by any recorded operation")
    tape = loss._node.tape
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._node is None:
                leaves[key] = inp
    tape.consumed = True
    tape.nodes.clear()

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result
