"""Differentiable ops on :class:`~protoflow.ndcore.tensor.Tensor`.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or
a 0-d scalar on either side. Anything wider goes through an explicit
:func:`broadcast_to`, so every expansion is visible in the graph.
"""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from ..exceptions import DomainError, ShapeError
from .tensor import Tensor

ELU_ALPHA = 1.0


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _scalar_or_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, numbers.Real):
        return Tensor(float(x))
    return Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                     "(only equal shapes or scalar operands are supported)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the scalar case can reach here
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _scalar_or_tensor(a), _scalar_or_tensor(b)
    _check_elementwise(a, b, "add")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = _scalar_or_tensor(a), _scalar_or_tensor(b)
    _check_elementwise(a, b, "sub")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = _scalar_or_tensor(a), _scalar_or_tensor(b)
    _check_elementwise(a, b, "mul")

    def _backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = _scalar_or_tensor(a), _scalar_or_tensor(b)
    _check_elementwise(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def _backward(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * out / b.data, b.shape))

    return Tensor._from_op(out, (a, b), _backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar (no graph node for ``c``)."""
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


# -- elementwise unary -------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive input")
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(x.data)

    def _backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return Tensor._from_op(out, (x,), _backward)


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    pos = x.data > 0.0
    neg_part = np.expm1(np.minimum(x.data, 0.0)) * ELU_ALPHA
    out = np.where(pos, x.data, neg_part)
    slope = np.where(pos, 1.0, neg_part + ELU_ALPHA)
    return Tensor._from_op(out, (x,), lambda g: (g * slope,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is passed only where ``x > floor``."""
    keep = x.data > floor
    out = np.where(keep, x.data, floor)
    return Tensor._from_op(out, (x,), lambda g: (g * keep,))


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Supports ``(m, k) @ (k, n)``, stacked ``(..., m, k) @ (..., k, n)`` with
    identical leading dims, and a shared 2-D right operand
    ``(..., m, k) @ (k, n)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ ({a.shape} @ {b.shape})")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul: right operand has more dims than left ({a.shape} @ {b.shape})")
    out = a.data @ b.data

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), _backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,),
                           lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


# -- reductions and shape ----------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    original = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style expansion; the gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from exc
    src = x.shape
    lead = len(shape) - len(src)

    def _backward(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor._from_op(out, (x,), _backward)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ndim = tensors[0].ndim
    if ndim == 0:
        raise ShapeError("concat: cannot concatenate 0-d tensors")
    axis = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = _norm_axis(axis, x.ndim)
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to {x.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + n)
        out.append(take(x, tuple(index)))
        start += n
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def take(x: Tensor, index) -> Tensor:
    """Numpy indexing (basic or advanced) with scatter-add backward."""
    out = np.array(x.data[index], dtype=np.float64)
    shape = x.shape

    def _backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (x,), _backward)


# -- softmax family ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), _backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), _backward)


# -- composites --------------------------------------------------------------

def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt(sum(square(x), axis=axis, keepdims=keepdims))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity: need two equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine_similarity: zero-norm input")
    return div(sum(mul(a, b)), mul(norm(a), norm(b)))


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    if np.any(np.linalg.norm(x.data, axis=-1) == 0.0):
        raise DomainError("normalize_rows: zero-norm row")
    n = norm(x, axis=-1, keepdims=True)
    return div(x, broadcast_to(n, x.shape)) if x.ndim else div(x, n)


def cosine_matrix(x: Tensor, p: Tensor) -> Tensor:
    """``out[i, k] = cos(x[i], p[k])`` for row sets ``x`` (m, d) and ``p`` (n, d)."""
    return matmul(normalize_rows(x), transpose(normalize_rows(p)))
