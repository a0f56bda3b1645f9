"""Dense tensors with reverse-mode automatic differentiation.

A small define-by-run tape over numpy arrays: each operation stores its
parent nodes and a backward closure on the result, and ``backward()`` walks
the recorded DAG exactly once in reverse topological order, accumulating
gradients additively across shared subexpressions. Training runs in float32;
``gradient_check`` re-runs the same computation in float64 and compares the
analytic gradients against central differences.

Not goals: GPU execution, operator fusion, graph rewriting, sparse data.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

# Norm floor below which l2_normalize refuses to divide. Small enough to
# never trigger on real activations, large enough to stop 1/0 blow-ups.
NORM_EPSILON = 1e-12


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateVectorError(ValueError):
    """Vector norm at or below the epsilon floor; cannot normalize."""


class EmptySequenceError(ValueError):
    """No unmasked positions to operate over."""


class NumericFaultError(ArithmeticError):
    """A non-finite value turned up during a numeric check."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node in the computation graph: numpy payload plus optional tape record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this node; ``seed`` defaults to ones (scalar roots)."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar node")
            seed = np.ones_like(self.data)
        # iterative topological sort: recursion would overflow on long
        # recurrent chains (thousands of timestep nodes)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accumulate(self, np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _accumulate(node: Tensor, g: np.ndarray):
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad = node.grad + g


def _result(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _result(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeMismatchError(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
    b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
    out2 = a2 @ b2
    out_shape = out2.shape
    if ad.ndim == 1:
        out_shape = out_shape[1:]
    if bd.ndim == 1:
        out_shape = out_shape[:-1]
    data = out2.reshape(out_shape)

    def backward(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        if a.requires_grad:
            _accumulate(a, (g2 @ b2.T).reshape(ad.shape))
        if b.requires_grad:
            _accumulate(b, (a2.T @ g2).reshape(bd.shape))

    return _result(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _result(a.data.T, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _result(data, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis) * (1.0 / n)


def get_row(a: Tensor, idx: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accumulate(a, full)

    return _result(a.data[idx], (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _result(a.data[idx], (a,), backward)


def stack_rows(rows) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    rows = list(rows)
    data = np.stack([r.data for r in rows])

    def backward(g):
        for i, r in enumerate(rows):
            if r.requires_grad:
                _accumulate(r, g[i])

    return _result(data, tuple(rows), backward)


def diag_part(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ShapeMismatchError(f"diag_part expects a square matrix, got {a.data.shape}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.fill_diagonal(full, g)
            _accumulate(a, full)

    return _result(np.diagonal(a.data).copy(), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - data * data))

    return _result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = expit(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _result(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return _result(data, (a,), backward)


_POINTWISE = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def pointwise(a: Tensor, fn: str) -> Tensor:
    """Elementwise nonlinearity by name: tanh, sigmoid or relu."""
    try:
        return _POINTWISE[fn](a)
    except KeyError:
        raise ValueError(f"unknown pointwise function {fn!r}; choose from {sorted(_POINTWISE)}") from None


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """W x + b for a vector x; shape errors name both offending shapes."""
    if w.data.ndim != 2 or x.data.ndim != 1 or w.data.shape[1] != x.data.shape[0]:
        raise ShapeMismatchError(f"affine: weight {w.data.shape} does not match input {x.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeMismatchError(f"affine: bias {b.data.shape} does not match weight {w.data.shape}")
    return add(matmul(w, x), b)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


def l2_normalize(a: Tensor) -> Tensor:
    """x / ||x||_2 with the exact quotient-rule backward."""
    x = a.data
    norm = float(np.sqrt((x.astype(np.float64) ** 2).sum()))
    if norm <= NORM_EPSILON:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm:.3e} <= {NORM_EPSILON:.0e}")
    inv = np.asarray(1.0 / norm, dtype=x.dtype)
    data = x * inv

    def backward(g):
        if a.requires_grad:
            _accumulate(a, (g - data * (data * g).sum()) * inv)

    return _result(data, (a,), backward)


def masked_time_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over unmasked positions; masked entries come out exactly 0."""
    x = logits.data
    if x.ndim != 1:
        raise ShapeMismatchError(f"masked_time_softmax expects a 1-D logit vector, got {x.shape}")
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ShapeMismatchError(f"mask shape {m.shape} does not match logits {x.shape}")
    if not m.any():
        raise EmptySequenceError("softmax over a fully masked sequence")
    shifted = x - x[m].max()
    e = np.exp(shifted, where=m, out=np.zeros_like(x))
    data = e / e.sum()

    def backward(g):
        if logits.requires_grad:
            s = (g * data).sum()
            _accumulate(logits, data * (g - s))

    return _result(data, (logits,), backward)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeMismatchError(f"targets {y.shape} do not match logits {z.shape}")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(per.mean(), dtype=z.dtype)

    def backward(g):
        if logits.requires_grad:
            _accumulate(logits, g * (expit(z) - y) / z.size)

    return _result(data, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    tol: float
    n_checked: int
    entries: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


def gradient_check(f, params: dict, h: float = 1e-3, tol: float = 1e-4,
                   keep_entries: bool = False) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call and be
    deterministic. Run with float64 parameters: the h^2 truncation error of
    the central difference is otherwise buried in float32 round-off.
    Relative error uses a unit floor, |a - n| / max(1, |a|, |n|), so that
    near-zero gradients are compared absolutely.
    """
    zero_grads(params)
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericFaultError("objective evaluated to a non-finite value")
    out.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    worst = None
    max_rel = 0.0
    n_checked = 0
    entries = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericFaultError(f"non-finite objective while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(ana[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            n_checked += 1
            idx = np.unravel_index(i, p.data.shape)
            if keep_entries:
                entries.append(GradCheckEntry(name, idx, a, numeric, rel))
            if rel > max_rel:
                max_rel = rel
                worst = GradCheckEntry(name, idx, a, numeric, rel)
    return GradCheckReport(max_rel_err=max_rel, worst=worst, tol=tol,
                           n_checked=n_checked, entries=entries)
