"""
components.autograd
Small dense-tensor engine with reverse-mode differentiation (float64, numpy).

Only the operations the servo controller needs are provided: arithmetic with
broadcasting, matmul, elementwise nonlinearities, axis softmax, concatenation,
row gathers and segment (per-destination) reductions for message passing.

Usage:
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    y = (x @ w).tanh().sum()
    y.backward()
    x.grad  # d y / d x
"""
from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "as_tensor", "concat", "take_rows", "segment_sum", "segment_softmax",
    "segment_max", "scatter_rows", "softmax", "grad_check", "MultAddCounter",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]

_counters: List["MultAddCounter"] = []


class MultAddCounter:
    """Context manager counting matmul multiply-adds executed inside it."""

    def __init__(self):
        self.count = 0

    def __enter__(self) -> "MultAddCounter":
        _counters.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _counters.remove(self)


def _record_mult_adds(n: int) -> None:
    for c in _counters:
        c.count += n


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array with an optional gradient and the closure that propagates it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (), name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagates ``grad`` (default ones) to every tensor this one depends on."""
        if not self.requires_grad:
            return
        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- graph construction helpers ---

    @staticmethod
    def _make(data: np.ndarray, parents: Tuple["Tensor", ...],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        requires = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=requires, parents=parents if requires else ())
        if requires:
            out._backward = backward
        return out

    # --- arithmetic ---

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))
        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))
        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))
        return Tensor._make(a.data / b.data, (a, b), backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        _record_mult_adds(a.shape[0] * a.shape[1] * b.shape[1])

        def backward(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)
        return Tensor._make(a.data @ b.data, (a, b), backward)

    def pow(self, exponent: float) -> "Tensor":
        a = self
        return Tensor._make(a.data ** exponent, (a,),
                            lambda g: a._accumulate(g * exponent * a.data ** (exponent - 1)))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * 0.5 / out))

    # --- shape ---

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: a._accumulate(g.T))

    def reshape(self, *shape: int) -> "Tensor":
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)
        return Tensor._make(a.data[index], (a,), backward)

    # --- reductions ---

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # --- elementwise nonlinearities ---

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * (1.0 - out ** 2)))

    def sigmoid(self) -> "Tensor":
        a = self
        out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: a._accumulate(g * out))


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return Tensor._make(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def scatter_rows(values: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    """
    Row-wise scatter-add: out[index[k]] += values[k] for ``count`` output rows.

    Runs as a sparse (count x len(index)) product, which sums in a fixed order.
    """
    values = np.asarray(values, dtype=float)
    index = np.asarray(index, dtype=np.int64)
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=count).astype(float)
    flat = values.reshape(len(index), int(np.prod(values.shape[1:])))
    selector = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                                 shape=(count, len(index)))
    return np.asarray(selector @ flat).reshape((count,) + values.shape[1:])


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gathers rows ``x[index]``; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        x._accumulate(scatter_rows(g, index, x.shape[0]))
    return Tensor._make(x.data[index], (x,), backward)


def segment_sum(x: Tensor, segments: np.ndarray, count: int) -> Tensor:
    """Sums rows of ``x`` into ``count`` output rows selected by ``segments``."""
    segments = np.asarray(segments, dtype=np.int64)
    out = scatter_rows(x.data, segments, count)
    return Tensor._make(out, (x,), lambda g: x._accumulate(g[segments]))


def segment_softmax(scores: Tensor, segments: np.ndarray, count: int) -> Tensor:
    """Softmax of a 1-D score vector within each segment."""
    segments = np.asarray(segments, dtype=np.int64)
    peak = np.full(count, -np.inf)
    np.maximum.at(peak, segments, scores.data)
    e = np.exp(scores.data - peak[segments])
    denom = np.bincount(segments, weights=e, minlength=count)
    out = e / denom[segments]

    def backward(g):
        weighted = np.bincount(segments, weights=g * out, minlength=count)
        scores._accumulate(out * (g - weighted[segments]))
    return Tensor._make(out, (scores,), backward)


def segment_max(x: Tensor, segments: np.ndarray, count: int) -> Tensor:
    """
    Channel-wise max of rows within each segment; empty segments give zeros.
    The gradient goes to the first row attaining the max.
    """
    segments = np.asarray(segments, dtype=np.int64)
    width = x.shape[1]
    out = np.full((count, width), -np.inf)
    np.maximum.at(out, segments, x.data)
    rows, cols = np.nonzero(x.data == out[segments])
    keys = segments[rows] * width + cols
    _, first = np.unique(keys, return_index=True)
    win_rows, win_cols = rows[first], cols[first]
    out[np.isinf(out)] = 0.0

    def backward(g):
        full = np.zeros_like(x.data)
        full[win_rows, win_cols] = g[segments[win_rows], win_cols]
        x._accumulate(full)
    return Tensor._make(out, (x,), backward)


def _scalarize(out: Tensor) -> Tensor:
    if out.data.size == 1:
        return out.reshape(())
    weights = np.random.default_rng(0).uniform(0.5, 1.5, size=out.shape)
    return (out * weights).sum()


def grad_check(fn: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-5) -> float:
    """
    Largest relative error between reverse-mode and central-difference gradients.

    ``fn`` rebuilds the computation from the current ``inputs`` data; non-scalar
    outputs are reduced with a fixed random weighting. The error per input is
    ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12).
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.zero_grad()
    _scalarize(fn()).backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = _scalarize(fn()).item()
            flat[i] = orig - eps
            minus = _scalarize(fn()).item()
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2 * eps)
        denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric)) / denom)
    for t in inputs:
        t.zero_grad()
    return worst
