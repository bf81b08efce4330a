"""Dense float64 arrays with reverse-mode automatic differentiation.

Every value flowing through the model is a :class:`Tensor`: a numpy array
plus an optional gradient and a closure that knows how to push gradients to
the tensors it was computed from.  Calling ``backward()`` on a scalar walks
the recorded graph in reverse topological order and accumulates ``grad`` on
every tensor that requires it.

The engine is deliberately small: double precision only, no views into
shared storage, no in-place graph ops, and no global random state.  All
randomness goes through an explicit :class:`RngState`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, ndtr

from .errors import DegenerateInputError, DimensionError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Epsilon added to the mean in the coefficient-of-variation denominator so
# the balancing losses stay finite on all-zero statistics.
CV_EPSILON = 1e-10


def _as_tensor(value) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array with optional gradient tracking.

    Attributes:
        data: the values, always a contiguous-enough float64 ndarray.
        grad: accumulated partial derivatives, same shape as ``data``,
            or None before any backward pass.
        requires_grad: whether backward passes accumulate into ``grad``.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple = ()
        self._op = ""

    # -- graph construction -------------------------------------------------

    @classmethod
    def result_of(cls, data, parents, op: str = "") -> "Tensor":
        """Create an op output. The caller attaches ``_backward`` afterwards
        iff the result requires grad (checked via ``requires_grad``)."""
        out = cls(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._op = op
        return out

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        op = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{op})"

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode gradient accumulation from this scalar."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() starts from a scalar loss, got shape {self.data.shape}"
            )
        order = self._topo_order()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def _topo_order(self) -> list:
        """Iterative post-order over the graph: parents before children."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor.result_of(self.data + other.data, (self, other), "+")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad)
                other.accumulate_grad(out.grad)
            out._backward = _backward
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor.result_of(self.data * other.data, (self, other), "*")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad * other.data)
                other.accumulate_grad(out.grad * self.data)
            out._backward = _backward
        return out

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor.result_of(-self.data, (self,), "neg")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(-out.grad)
            out._backward = _backward
        return out

    def __sub__(self, other):
        other = _as_tensor(other)
        out = Tensor.result_of(self.data - other.data, (self, other), "-")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad)
                other.accumulate_grad(-out.grad)
            out._backward = _backward
        return out

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = Tensor.result_of(self.data / other.data, (self, other), "/")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad / other.data)
                other.accumulate_grad(-out.grad * self.data / (other.data * other.data))
            out._backward = _backward
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor.result_of(self.data ** exponent, (self,), f"**{exponent}")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad * exponent * self.data ** (exponent - 1))
            out._backward = _backward
        return out

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape
        out = Tensor.result_of(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad.reshape(original))
            out._backward = _backward
        return out

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError(f"transpose expects a matrix, got shape {self.data.shape}")
        out = Tensor.result_of(self.data.T, (self,), "T")
        if out.requires_grad:
            def _backward():
                self.accumulate_grad(out.grad.T)
            out._backward = _backward
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor.result_of(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            shape = self.data.shape
            def _backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.accumulate_grad(np.broadcast_to(g, shape))
            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


# -- elementwise functions ---------------------------------------------------


def exp(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = Tensor.result_of(np.exp(t.data), (t,), "exp")
    if out.requires_grad:
        def _backward():
            t.accumulate_grad(out.grad * out.data)
        out._backward = _backward
    return out


def log(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = Tensor.result_of(np.log(t.data), (t,), "log")
    if out.requires_grad:
        def _backward():
            t.accumulate_grad(out.grad / t.data)
        out._backward = _backward
    return out


def sqrt(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = Tensor.result_of(np.sqrt(t.data), (t,), "sqrt")
    if out.requires_grad:
        def _backward():
            t.accumulate_grad(out.grad * 0.5 / out.data)
        out._backward = _backward
    return out


def softplus(t: Tensor) -> Tensor:
    """Overflow-safe ln(1 + e^x); strictly positive for finite input."""
    t = _as_tensor(t)
    out = Tensor.result_of(np.logaddexp(0.0, t.data), (t,), "softplus")
    if out.requires_grad:
        def _backward():
            t.accumulate_grad(out.grad * expit(t.data))
        out._backward = _backward
    return out


def normal_cdf(t: Tensor) -> Tensor:
    """Standard normal CDF, evaluated through the error function.

    Differentiable: the backward pass uses the normal density.
    """
    t = _as_tensor(t)
    out = Tensor.result_of(ndtr(t.data), (t,), "normal_cdf")
    if out.requires_grad:
        def _backward():
            density = _INV_SQRT_2PI * np.exp(-0.5 * t.data * t.data)
            t.accumulate_grad(out.grad * density)
        out._backward = _backward
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor.result_of(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            a.accumulate_grad(out.grad @ b.data.T)
            b.accumulate_grad(a.data.T @ out.grad)
        out._backward = _backward
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalized exponentials along `axis`.

    Inputs may contain -inf sentinels (masked entries): those map to exactly
    0 in the output.  A slice that is entirely -inf has no finite mass to
    normalize and raises :class:`DegenerateInputError`.  Stabilized by
    max-subtraction, so any finite logits are safe.
    """
    t = _as_tensor(t)
    peak = np.max(t.data, axis=axis, keepdims=True)
    if np.any(np.isneginf(peak)):
        raise DegenerateInputError("softmax input is -inf along the whole axis")
    shifted = t.data - peak
    exps = np.exp(shifted)  # exp(-inf) == 0 exactly
    probs = exps / exps.sum(axis=axis, keepdims=True)
    out = Tensor.result_of(probs, (t,), "softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            inner = (g * probs).sum(axis=axis, keepdims=True)
            t.accumulate_grad(probs * (g - inner))
        out._backward = _backward
    return out


def coefficient_of_variation_sq(t: Tensor, eps: float = CV_EPSILON) -> Tensor:
    """Squared coefficient of variation of a vector of batch statistics.

    Uses the population variance and guards the denominator with `eps`, so
    constant vectors (all-zero included) give zero and the result stays
    differentiable everywhere.  Equals (Std(v) / (Mean(v) + eps))^2.
    """
    t = _as_tensor(t)
    flat = t.reshape(-1) if t.data.ndim != 1 else t
    m = flat.mean()
    var = ((flat - m) ** 2).mean()
    return var / (m + eps) ** 2


# -- indexed access ----------------------------------------------------------


def take_rows(t: Tensor, index) -> Tensor:
    """Select rows along axis 0; gradients scatter-add back."""
    t = _as_tensor(t)
    index = np.asarray(index, dtype=np.intp)
    out = Tensor.result_of(t.data[index], (t,), "take_rows")
    if out.requires_grad:
        def _backward():
            buf = np.zeros_like(t.data)
            np.add.at(buf, index, out.grad)
            t.accumulate_grad(buf)
        out._backward = _backward
    return out


def gather(t: Tensor, rows, cols) -> Tensor:
    """Fancy-indexed read t[rows, cols]; duplicates accumulate on backward."""
    t = _as_tensor(t)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor.result_of(t.data[rows, cols], (t,), "gather")
    if out.requires_grad:
        def _backward():
            buf = np.zeros_like(t.data)
            np.add.at(buf, (rows, cols), out.grad)
            t.accumulate_grad(buf)
        out._backward = _backward
    return out


def scatter_rows(values: Tensor, index, n_rows: int) -> Tensor:
    """Place `values` rows into a zero (n_rows, d) tensor at `index`."""
    values = _as_tensor(values)
    index = np.asarray(index, dtype=np.intp)
    data = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float64)
    np.add.at(data, index, values.data)
    out = Tensor.result_of(data, (values,), "scatter_rows")
    if out.requires_grad:
        def _backward():
            values.accumulate_grad(out.grad[index])
        out._backward = _backward
    return out


# -- randomness --------------------------------------------------------------


class RngState:
    """Seeded PCG64 generator: the only source of randomness in the toolkit.

    The same seed always reproduces the same sample stream bit-exactly
    (numpy's PCG64 state transition is fixed and documented).  One state is
    threaded through initialization, shuffling, and gate-noise sampling so a
    whole run is a pure function of its seed.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def standard_normal_sample(rng: RngState, shape) -> Tensor:
    """I.i.d. N(0, 1) draws as a non-differentiable leaf tensor."""
    return Tensor(rng.normal(shape))
