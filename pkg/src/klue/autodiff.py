"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The engine builds a fresh acyclic graph per forward pass.  Every operation
records value-to-parent pullback closures; ``backward`` walks the graph in
reverse topological order and accumulates exact gradients into every
reachable node with ``requires_grad`` set.

Broadcasting is deliberately restricted to scalar-with-tensor; matrix
shapes are handled by dedicated ops (``matmul``, ``add_bias``).  All
engine-produced values are checked for NaN/Inf unless disabled via
``no_finite_checks``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "Node",
    "constant",
    "param",
    "backward",
    "zero_grad",
    "no_grad",
    "no_finite_checks",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "add_bias",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "power",
    "relu",
    "clamp",
    "clamp_prob",
    "asum",
    "amean",
    "sum_last",
    "softmax_last",
    "row_normalize",
    "frobenius_sq",
    "getcol",
    "stack_cols",
    "concat",
    "take",
    "gradcheck",
    "GradCheckReport",
    "PROB_EPS",
]

PROB_EPS = 1e-7

_GRAD_ENABLED = True
_CHECK_FINITE = True


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation-only forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def no_finite_checks():
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Node:
    """A value in the computation graph.

    ``parents`` holds (parent, pullback) pairs where the pullback maps the
    upstream gradient to this parent's gradient contribution.
    """

    __slots__ = ("value", "parents", "requires_grad", "grad", "op")

    def __init__(self, value, parents=(), requires_grad=False, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(
            p.requires_grad for p, _ in self.parents
        )
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, expo):
        return power(self, expo)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    return Node(value, op="const")


def param(value) -> Node:
    return Node(value, requires_grad=True, op="param")


def _coerce(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64), op="const")


def _make(value, parents, op) -> Node:
    value = np.asarray(value, dtype=np.float64)
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    if not _GRAD_ENABLED or not any(p.requires_grad for p, _ in parents):
        return Node(value, op=op)
    return Node(value, parents, op=op)


def _check_elementwise(op: str, a: Node, b: Node) -> None:
    if a.value.shape == b.value.shape:
        return
    if a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.value.shape} vs {b.value.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # only scalar-with-tensor broadcast is permitted
    if shape == ():
        return np.asarray(np.sum(g))
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("add", a, b)
    return _make(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.value.shape)),
         (b, lambda g: _unbroadcast(g, b.value.shape))],
        "add",
    )


def sub(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("sub", a, b)
    return _make(
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, a.value.shape)),
         (b, lambda g: _unbroadcast(-g, b.value.shape))],
        "sub",
    )


def mul(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise("mul", a, b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)),
         (b, lambda g: _unbroadcast(g * av, bv.shape))],
        "mul",
    )


def sigmoid(x) -> Node:
    x = _coerce(x)
    v = x.value
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make(out, [(x, lambda g: g * out * (1.0 - out))], "sigmoid")


def tanh(x) -> Node:
    x = _coerce(x)
    out = np.tanh(x.value)
    return _make(out, [(x, lambda g: g * (1.0 - out * out))], "tanh")


def exp(x) -> Node:
    x = _coerce(x)
    # overflow surfaces as a NonFiniteError from _make, not a numpy warning
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _make(out, [(x, lambda g: g * out)], "exp")


def log(x) -> Node:
    """Natural log; the argument is clamped below at a tiny floor.

    Negative inputs are a domain error (probabilities should be clamped
    with :func:`clamp_prob` before reaching here).
    """
    x = _coerce(x)
    if np.any(x.value < 0):
        raise DomainError("log: negative argument")
    xc = np.maximum(x.value, 1e-300)
    return _make(np.log(xc), [(x, lambda g: g / xc)], "log")


def power(x, expo: float, grad_eps: float = 0.0) -> Node:
    """Elementwise x**expo with a constant exponent.

    ``grad_eps`` floors the base inside the gradient only, keeping the
    forward value exact while avoiding infinite derivatives at 0 for
    fractional exponents.
    """
    x = _coerce(x)
    expo = float(expo)
    v = x.value
    if expo != int(expo) and np.any(v < 0):
        raise DomainError(f"power: negative base with fractional exponent {expo}")
    out = v ** expo
    if grad_eps > 0.0:
        base = np.maximum(v, grad_eps)
    else:
        base = v
    return _make(
        out, [(x, lambda g: g * expo * base ** (expo - 1.0))], "power"
    )


def relu(x) -> Node:
    """Maximum with zero (subgradient 0 at the kink)."""
    x = _coerce(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)], "relu")


def clamp(x, lo: float, hi: float) -> Node:
    x = _coerce(x)
    inside = (x.value > lo) & (x.value < hi)
    return _make(np.clip(x.value, lo, hi), [(x, lambda g: g * inside)], "clamp")


def clamp_prob(x) -> Node:
    """Clamp probabilities into [PROB_EPS, 1 - PROB_EPS]."""
    return clamp(x, PROB_EPS, 1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    a, b = _coerce(a), _coerce(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    return _make(
        av @ bv,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
        "matmul",
    )


def transpose(x) -> Node:
    x = _coerce(x)
    if x.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {x.value.shape}")
    return _make(x.value.T, [(x, lambda g: g.T)], "transpose")


def add_bias(x, b) -> Node:
    """Add a bias row-vector b[n] to every row of x[m, n]."""
    x, b = _coerce(x), _coerce(b)
    if x.value.ndim != 2 or b.value.ndim != 1 or x.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"add_bias: incompatible shapes {x.value.shape} + {b.value.shape}"
        )
    return _make(
        x.value + b.value,
        [(x, lambda g: g), (b, lambda g: g.sum(axis=0))],
        "add_bias",
    )


# ---------------------------------------------------------------------------
# reductions and structured ops


def asum(x) -> Node:
    x = _coerce(x)
    shape = x.value.shape
    return _make(
        np.sum(x.value), [(x, lambda g: np.broadcast_to(g, shape).copy())], "sum"
    )


def amean(x) -> Node:
    x = _coerce(x)
    n = x.value.size
    shape = x.value.shape
    return _make(
        np.mean(x.value),
        [(x, lambda g: np.broadcast_to(g / n, shape).copy())],
        "mean",
    )


def sum_last(x) -> Node:
    x = _coerce(x)
    if x.value.ndim == 0:
        raise ShapeError("sum_last: scalar input")
    return _make(
        np.sum(x.value, axis=-1),
        [(x, lambda g: np.broadcast_to(np.expand_dims(g, -1), x.value.shape).copy())],
        "sum_last",
    )


def softmax_last(x, temperature: float) -> Node:
    """Row-wise softmax(temperature * x) over the last axis.

    temperature 0 yields uniform weights (and zero gradient).
    """
    x = _coerce(x)
    if x.value.ndim == 0:
        raise ShapeError("softmax_last: scalar input")
    t = float(temperature)
    z = t * x.value
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def pullback(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return t * out * (g - dot)

    return _make(out, [(x, pullback)], "softmax_last")


def row_normalize(x, eps: float = 1e-12) -> Node:
    """L2-normalize each row of x[m, n]; rows with norm <= eps are scaled by 1/eps."""
    x = _coerce(x)
    if x.value.ndim != 2:
        raise ShapeError(f"row_normalize: expected 2-d, got {x.value.shape}")
    norms = np.linalg.norm(x.value, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    out = x.value / denom

    def pullback(g):
        proj = np.sum(g * out, axis=1, keepdims=True)
        safe = norms > eps
        return np.where(safe, (g - out * proj) / denom, g / denom)

    return _make(out, [(x, pullback)], "row_normalize")


def frobenius_sq(x) -> Node:
    """Squared Frobenius norm (sum of squared entries)."""
    x = _coerce(x)
    return _make(
        np.sum(x.value * x.value), [(x, lambda g: g * 2.0 * x.value)], "frobenius_sq"
    )


def getcol(x, j: int) -> Node:
    x = _coerce(x)
    if x.value.ndim != 2:
        raise ShapeError(f"getcol: expected 2-d, got {x.value.shape}")
    j = int(j)
    if not 0 <= j < x.value.shape[1]:
        raise ShapeError(f"getcol: column {j} out of range for {x.value.shape}")

    def pullback(g):
        full = np.zeros_like(x.value)
        full[:, j] = g
        return full

    return _make(x.value[:, j].copy(), [(x, pullback)], "getcol")


def stack_cols(nodes: Sequence[Node]) -> Node:
    """Stack 1-d nodes of equal length into a [m, len(nodes)] matrix."""
    nodes = [_coerce(n) for n in nodes]
    if not nodes:
        raise ShapeError("stack_cols: empty input")
    m = nodes[0].value.shape
    for n in nodes:
        if n.value.shape != m or n.value.ndim != 1:
            raise ShapeError("stack_cols: inputs must be equal-length vectors")
    out = np.stack([n.value for n in nodes], axis=1)

    def make_pullback(i):
        return lambda g: g[:, i]

    return _make(out, [(n, make_pullback(i)) for i, n in enumerate(nodes)], "stack_cols")


def concat(nodes: Sequence[Node]) -> Node:
    """Concatenate 1-d nodes into one vector."""
    nodes = [_coerce(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: empty input")
    for n in nodes:
        if n.value.ndim != 1:
            raise ShapeError("concat: inputs must be vectors")
    out = np.concatenate([n.value for n in nodes])
    parents = []
    off = 0
    for n in nodes:
        size = n.value.shape[0]

        def make_pullback(o=off, s=size):
            return lambda g: g[o : o + s]

        parents.append((n, make_pullback()))
        off += size
    return _make(out, parents, "concat")


def take(x, indices) -> Node:
    """Gather entries of a 1-d node at the given indices."""
    x = _coerce(x)
    if x.value.ndim != 1:
        raise ShapeError(f"take: expected 1-d, got {x.value.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def pullback(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        return full

    return _make(x.value[idx].copy(), [(x, pullback)], "take")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Node) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable
    requires_grad node.  root must be scalar; repeated calls accumulate."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    flowing = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        for parent, pullback in node.parents:
            if not parent.requires_grad:
                continue
            contrib = np.asarray(pullback(g), dtype=np.float64)
            if contrib.shape != parent.value.shape:
                contrib = contrib.reshape(parent.value.shape)
            prev = flowing.get(id(parent))
            flowing[id(parent)] = contrib if prev is None else prev + contrib


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tol: float
    step: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        lines = [
            f"{e.name}: max_rel_err={e.max_rel_err:.3e} "
            f"(analytic={e.analytic:.6g}, numeric={e.numeric:.6g})"
            for e in self.entries
        ]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} at tol {self.tol}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def gradcheck(
    f: Callable[[], Node],
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central finite
    differences for every entry of every parameter in ``params``.

    f must be deterministic and rebuild its graph from the current
    parameter values on each call.
    """
    zero_grad(params.values())
    out = f()
    if out.value.size != 1:
        raise ShapeError("gradcheck: f() must return a scalar")
    backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }

    report = GradCheckReport(tol=tol, step=step)
    for name, p in params.items():
        flat = p.value.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().value)
            flat[i] = orig - step
            fm = float(f().value)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        a_flat = analytic[name].reshape(-1)
        errs = np.array([_rel_err(a, n) for a, n in zip(a_flat, numeric)])
        worst = int(np.argmax(errs)) if errs.size else 0
        report.entries.append(
            GradCheckEntry(
                name=name,
                max_rel_err=float(errs[worst]) if errs.size else 0.0,
                worst_index=worst,
                analytic=float(a_flat[worst]) if errs.size else 0.0,
                numeric=float(numeric[worst]) if errs.size else 0.0,
            )
        )
    return report
