"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph nodes are the tensors themselves: a tensor produced by an
operation keeps references to its parent tensors plus a VJP closure that
maps the upstream gradient to per-parent gradients.  ``Tensor.backward``
walks that graph once, in reverse topological order.

Deliberate restrictions, so every backward rule stays enumerable:
  * float64 everywhere, row-major, values must be finite (non-finite
    results raise ``NumericError`` instead of propagating silently);
  * no general broadcasting -- binary ops accept equal shapes, a python
    scalar, or a length-n vector against an (m, n) matrix (bias over rows);
  * matmul handles 2-d pairs and 3-d pairs with an equal leading dim;
  * ``stddev`` is the population standard deviation (divide by N).

``custom_grad`` installs a caller-supplied backward in place of the true
Jacobian; it is the pass-through mechanism the quantizers build on.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


Scalar = Union[int, float]
TensorLike = Union["Tensor", Scalar, Sequence, np.ndarray]


def _as_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    return arr


class Tensor:
    """Dense float64 array plus the autodiff bookkeeping for one graph node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, values: TensorLike, requires_grad: bool = False):
        data = values.data if isinstance(values, Tensor) else _as_array(values)
        if not np.isfinite(data).all():
            raise NumericError("tensor values must be finite")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None
        self._op: str = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], tuple], op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        out._op = op
        return out

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy cut off from the graph."""
        return Tensor(self.data.copy())

    def assign_(self, values: TensorLike) -> None:
        """Replace the stored values (same shape).  Reserved for parameter
        updates by the owning training loop; everything else treats
        tensors as immutable."""
        data = values.data if isinstance(values, Tensor) else _as_array(values)
        if data.shape != self.data.shape:
            raise ShapeError(f"assign_: shape {data.shape} != {self.data.shape}")
        if not np.isfinite(data).all():
            raise NumericError("assign_: values must be finite")
        self.data = data

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable
        requires_grad tensor.  Repeated calls add up; disconnected tensors
        keep ``grad`` as None."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        # Iterative post-order DFS; each node enters the order exactly once.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            upstream = flowing.get(id(node))
            if upstream is None:
                continue
            if node._vjp is not None:
                parent_grads = node._vjp(upstream)
                for parent, pgrad in zip(node._parents, parent_grads):
                    if pgrad is None or not parent.requires_grad:
                        continue
                    pgrad = np.asarray(pgrad, dtype=np.float64)
                    if pgrad.shape != parent.data.shape:
                        raise ShapeError(
                            f"backward of {node._op} returned gradient of shape "
                            f"{pgrad.shape} for parent of shape {parent.data.shape}")
                    if id(parent) in flowing:
                        flowing[id(parent)] = flowing[id(parent)] + pgrad
                    else:
                        flowing[id(parent)] = pgrad

        for node in order:
            acc = flowing.get(id(node))
            if acc is None:
                continue
            if not np.isfinite(acc).all():
                raise NumericError(f"gradient of {node._op} is non-finite")
            node.grad = acc if node.grad is None else node.grad + acc

    # -- operator sugar ----------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- binary elementwise ----------------------------------------------------
#
# _binary_mode decides the one permitted broadcast: 'same' shapes, a 0-d
# scalar on the right, or a length-n vector against (m, n) rows.

def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_bias"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, mode: str) -> np.ndarray:
    if mode == "same":
        return grad
    if mode == "scalar":
        return np.asarray(grad.sum())
    return grad.sum(axis=0)  # row_bias


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    mode = _binary_mode(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data + b.data

    def vjp(g):
        return g, _reduce_to(g, mode)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    mode = _binary_mode(a, b, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data - b.data

    def vjp(g):
        return g, _reduce_to(-g, mode)

    return Tensor._from_op(out, (a, b), vjp, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    mode = _binary_mode(a, b, "mul")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g * b_data, _reduce_to(g * a_data, mode)

    return Tensor._from_op(out, (a, b), vjp, "mul")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product; grad_a = g @ b^T, grad_b = a^T @ g.

    Accepts 2-d x 2-d, or 3-d x 3-d with an equal leading (batch) dim.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(b_data, -1, -2), np.swapaxes(a_data, -1, -2) @ g

    return Tensor._from_op(out, (a, b), vjp, "matmul")


# -- unary elementwise -------------------------------------------------------

def tanh(x: TensorLike) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, (x,), vjp, "tanh")


def exp(x: TensorLike) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def vjp(g):
        return (g * y,)

    return Tensor._from_op(y, (x,), vjp, "exp")


def log(x: TensorLike) -> Tensor:
    x = _lift(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    x_data = x.data

    def vjp(g):
        return (g / x_data,)

    return Tensor._from_op(y, (x,), vjp, "log")


def relu(x: TensorLike) -> Tensor:
    x = _lift(x)
    y = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return Tensor._from_op(y, (x,), vjp, "relu")


def clip(x: TensorLike, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes inside the interval (inclusive)
    and is zero outside."""
    if hi < lo:
        raise ValueError(f"clip: hi ({hi}) < lo ({lo})")
    x = _lift(x)
    y = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def vjp(g):
        return (g * inside,)

    return Tensor._from_op(y, (x,), vjp, "clip")


# -- softmax family ----------------------------------------------------------

def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = _lift(x)
    _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return Tensor._from_op(y, (x,), vjp, "softmax")


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = _lift(x)
    _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), vjp, "log_softmax")


def _check_axis(x: Tensor, axis: int, op: str) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")


# -- reductions ----------------------------------------------------------------

def tsum(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    x = _lift(x)
    if axis is None:
        y = np.asarray(x.data.sum())
        shape = x.shape

        def vjp(g):
            return (np.broadcast_to(g, shape).copy(),)
    else:
        _check_axis(x, axis, "sum")
        y = x.data.sum(axis=axis)
        shape, ax = x.shape, axis

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return Tensor._from_op(y, (x,), vjp, "sum")


def mean(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    x = _lift(x)
    if axis is None:
        n = x.size
        y = np.asarray(x.data.mean())
        shape = x.shape

        def vjp(g):
            return (np.broadcast_to(g / n, shape).copy(),)
    else:
        _check_axis(x, axis, "mean")
        n = x.shape[axis]
        y = x.data.mean(axis=axis)
        shape, ax = x.shape, axis

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g / n, ax), shape).copy(),)

    return Tensor._from_op(y, (x,), vjp, "mean")


def stddev(x: TensorLike) -> Tensor:
    """Population standard deviation over all elements (divide by N)."""
    x = _lift(x)
    if x.size == 0:
        raise ShapeError("stddev of an empty tensor")
    mu = x.data.mean()
    centered = x.data - mu
    s = float(np.sqrt((centered * centered).mean()))
    y = np.asarray(s)
    n = x.size

    def vjp(g):
        # Subgradient 0 at the non-differentiable constant-tensor point.
        if s == 0.0:
            return (np.zeros_like(centered),)
        return (g * centered / (n * s),)

    return Tensor._from_op(y, (x,), vjp, "stddev")


def mse(a: TensorLike, b: TensorLike) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    y = np.asarray((diff * diff).mean())
    n = max(a.size, 1)

    def vjp(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return Tensor._from_op(y, (a, b), vjp, "mse")


# -- layout -----------------------------------------------------------------

def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    else:
        axes = tuple(axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    y = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(y.copy(), (x,), vjp, "transpose")


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    y = x.data.reshape(shape)
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return Tensor._from_op(y.copy(), (x,), vjp, "reshape")


# -- fused layer norm ----------------------------------------------------------

def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data
    gamma_data = gamma.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma_data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._from_op(y, (x, gamma, beta), vjp, "layer_norm")


# -- custom gradient hook -------------------------------------------------------

def custom_grad(forward_fn: Callable[..., np.ndarray],
                backward_fn: Callable[..., object],
                inputs: Sequence[Tensor],
                name: str = "custom_grad") -> Tensor:
    """Run ``forward_fn`` on the raw arrays; on backward, ignore its true
    Jacobian and call ``backward_fn(upstream, *input_arrays)`` instead.

    ``backward_fn`` returns one gradient per input (a single array is
    accepted for one input).  Wrong-shaped gradients raise ``ShapeError``
    at backward time.  Pairing forward=round with backward=identity gives
    the straight-through estimator.
    """
    inputs = tuple(_lift(t) for t in inputs)
    arrays = tuple(t.data for t in inputs)
    out = np.asarray(forward_fn(*arrays), dtype=np.float64)

    def vjp(g):
        grads = backward_fn(g, *arrays)
        if isinstance(grads, np.ndarray) or np.isscalar(grads):
            grads = (grads,)
        grads = tuple(grads)
        if len(grads) != len(inputs):
            raise ShapeError(
                f"{name}: backward returned {len(grads)} gradients for {len(inputs)} inputs")
        return grads

    return Tensor._from_op(out, inputs, vjp, name)
