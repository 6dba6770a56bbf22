"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: each operation on gradient-requiring tensors
records its parents and a backward closure, and ``Tensor.backward`` replays
the closures in reverse topological order. Sequence models simply unroll the
tape across time steps (discretize-then-optimize); there is no adjoint pass.

Only the shapes the models need are supported: scalars, vectors and
(batch, dim) matrices, with NumPy-style broadcasting on elementwise ops and
the 1-D/2-D matmul combinations.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf value reaches a place that forbids it."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference/rollout mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 array node participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        # Iterative topological order; unrolled sequences can exceed the
        # recursion limit.
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not (parent.requires_grad or parent._backward is not None):
                        continue
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = pg.copy() if pg.base is not None or pg is g else pg
                    else:
                        acc += pg
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after NumPy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# Registry of differentiable operations; the numerical-core acceptance test
# checks every entry against finite differences.
DIFFERENTIABLE_OPS: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn
    return deco


# -- elementwise binary ------------------------------------------------

@_register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return Tensor(out_data, parents=(a, b), backward=backward)


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape)))

    return Tensor(out_data, parents=(a, b), backward=backward)


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return Tensor(out_data, parents=(a, b), backward=backward)


@_register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    return Tensor(out_data, parents=(a, b), backward=backward)


# -- elementwise unary -------------------------------------------------

@_register("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    if not _tracked(a):
        return Tensor(-a.data)
    return Tensor(-a.data, parents=(a,), backward=lambda g: ((a, -g),))


@_register("pow_const")
def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data ** p
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    if not _tracked(a):
        return Tensor(out_data)
    return Tensor(out_data, parents=(a,), backward=lambda g: ((a, g * out_data),))


@_register("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)
    if not _tracked(a):
        return Tensor(out_data)
    return Tensor(out_data, parents=(a,), backward=lambda g: ((a, g / a.data),))


@_register("tanh")
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        return ((a, g * (1.0 - out_data * out_data)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Stable piecewise evaluation.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("relu")
def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        return ((a, g * (a.data > 0.0)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("softplus")
def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return ((a, g * s),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("abs")
def abs_(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        return ((a, g * np.sign(a.data)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("sqrt")
def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        return ((a, g * 0.5 / out_data),)

    return Tensor(out_data, parents=(a,), backward=backward)


# -- structural --------------------------------------------------------

@_register("matmul")
def matmul(a, b) -> Tensor:
    """Matrix product for the 1-D/2-D shape combinations the models use."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-D operands")
    if a.data.shape[-1] != b.data.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            ga, gb = g * bd, g * ad
        elif ad.ndim == 2 and bd.ndim == 1:
            ga, gb = np.outer(g, bd), ad.T @ g
        elif ad.ndim == 1 and bd.ndim == 2:
            ga, gb = g @ bd.T, np.outer(ad, g)
        else:
            ga, gb = g @ bd.T, ad.T @ g
        return ((a, ga), (b, gb))

    return Tensor(out_data, parents=(a, b), backward=backward)


@_register("transpose")
def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    if not _tracked(a):
        return Tensor(a.data.T)
    return Tensor(a.data.T, parents=(a,), backward=lambda g: ((a, g.T),))


@_register("sum")
def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.data.shape)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("mean")
def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out_data.size, 1)
    if not _tracked(a):
        return Tensor(out_data)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g / n, a.data.shape)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / n, a.data.shape)),)

    return Tensor(out_data, parents=(a,), backward=backward)


@_register("concat")
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


@_register("getitem")
def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[idx]
    if not _tracked(a):
        return Tensor(np.array(out_data, copy=True))

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return Tensor(np.array(out_data, copy=True), parents=(a,), backward=backward)


@_register("where")
def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a plain boolean array (not differentiated)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)
    if not _tracked(a, b):
        return Tensor(out_data)

    def backward(g):
        return ((a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape)),
                (b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape)))

    return Tensor(out_data, parents=(a, b), backward=backward)


def check_finite(t: Tensor, what: str = "value") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite {what} encountered")
    return t


# -- gradient checking -------------------------------------------------

class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    def __init__(self, passed: bool, max_error: float,
                 failures: list[tuple[str, int, float, float, float]]):
        self.passed = passed
        self.max_error = max_error
        self.failures = failures

    def __bool__(self):
        return self.passed

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        lines = [f"grad_check {status} (max error {self.max_error:.3e})"]
        for name, i, ana, num, err in self.failures[:20]:
            lines.append(f"  {name}[{i}]: analytic={ana:.6e} numeric={num:.6e} err={err:.3e}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor],
               tensors: Iterable[tuple[str, Tensor]] | Iterable[Tensor],
               tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central
    finite differences over every coordinate of ``tensors``.

    A coordinate passes when |analytic - numeric| is below ``tol`` either
    absolutely or relative to max(|analytic|, |numeric|).
    """
    named: list[tuple[str, Tensor]] = []
    for i, t in enumerate(tensors):
        if isinstance(t, tuple):
            named.append(t)
        else:
            named.append((f"t{i}", t))

    for _, t in named:
        t.requires_grad = True
        t.zero_grad()
    out = f()
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in named}

    failures = []
    max_err = 0.0
    for name, t in named:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                f_plus = float(f().data)
            flat[i] = orig - step
            with no_grad():
                f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[i])
            abs_err = abs(ana - numeric)
            rel_err = abs_err / max(abs(ana), abs(numeric), 1e-12)
            err = min(abs_err, rel_err)
            max_err = max(max_err, err)
            if abs_err > tol and rel_err > tol:
                failures.append((name, i, ana, numeric, err))

    return GradCheckReport(not failures, max_err, failures)
