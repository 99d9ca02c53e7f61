"""Reverse-mode differentiation on numpy arrays.

Every op in this module accepts plain arrays or :class:`Tracked` values. With
no tracked input the op is a thin numpy call; otherwise the result is recorded
on the tape that owns the inputs, so the same kernel code runs in both
inference and training.

Typical use::

    with Tape() as tape:
        loss = model_loss(...)            # parameters fetched via use(param)
    grads = backward(loss)                # {param.name: ndarray}
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Parameter",
    "Tape",
    "Tracked",
    "NumericError",
    "active_tape",
    "use",
    "backward",
    "finite_diff_check",
    "value_of",
]

EUCLIDEAN = "euclidean"
POINCARE = "poincare"


class NumericError(ArithmeticError):
    """Raised when a non-finite value or gradient appears on the tape."""


@dataclass(eq=False)
class Parameter:
    """Trainable tensor tagged with the manifold it lives on."""

    name: str
    value: np.ndarray
    manifold: str = EUCLIDEAN

    def __post_init__(self):
        if self.manifold not in (EUCLIDEAN, POINCARE):
            raise ValueError(f"unknown manifold {self.manifold!r} for {self.name}")
        self.value = np.asarray(self.value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Node:
    kind: str
    parents: tuple
    vjp: Callable | None
    value: np.ndarray


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations; nodes are stored in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Parameter] = {}
        self._watched: dict[int, Tracked] = {}

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, param: Parameter) -> "Tracked":
        key = id(param)
        tracked = self._watched.get(key)
        if tracked is None:
            tracked = self.record("param:" + param.name, param.value, (), None)
            self.leaves[tracked.node_id] = param
            self._watched[key] = tracked
        return tracked

    def record(self, kind, value, parents, vjp) -> "Tracked":
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, parents, vjp, value))
        return Tracked(value, node_id, self)


def use(param: Parameter):
    """Value of ``param`` for the current computation (tracked inside a tape)."""
    tape = active_tape()
    if tape is None:
        return param.value
    return tape.watch(param)


class Tracked:
    """Array value plus its node id on a tape."""

    __slots__ = ("value", "node_id", "tape")
    # make numpy hand mixed expressions back to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, node_id, tape):
        self.value = value
        self.node_id = node_id
        self.tape = tape

    def __repr__(self):
        return f"Tracked(node={self.node_id}, shape={np.shape(self.value)})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def value_of(x):
    return x.value if isinstance(x, Tracked) else x


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Tracked):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _record(kind, value, args, vjp):
    tape = _tape_of(args)
    parents = tuple(a.node_id if isinstance(a, Tracked) else None for a in args)
    return tape.record(kind, value, parents, vjp)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim = len(shape)
    while np.ndim(grad) > ndim:
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    ta, tb = isinstance(a, Tracked), isinstance(b, Tracked)
    if not (ta or tb):
        return a + b
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        "add", av + bv, (a, b),
        lambda g: (_unbroadcast(g, sa) if ta else None, _unbroadcast(g, sb) if tb else None),
    )


def sub(a, b):
    ta, tb = isinstance(a, Tracked), isinstance(b, Tracked)
    if not (ta or tb):
        return a - b
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        "sub", av - bv, (a, b),
        lambda g: (_unbroadcast(g, sa) if ta else None, _unbroadcast(-g, sb) if tb else None),
    )


def mul(a, b):
    ta, tb = isinstance(a, Tracked), isinstance(b, Tracked)
    if not (ta or tb):
        return a * b
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, sa) if ta else None, _unbroadcast(g * av, sb) if tb else None),
    )


def div(a, b):
    ta, tb = isinstance(a, Tracked), isinstance(b, Tracked)
    if not (ta or tb):
        return a / b
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv

    def vjp(g):
        ga = g / bv
        return (_unbroadcast(ga, sa) if ta else None, _unbroadcast(-ga * out, sb) if tb else None)

    return _record("div", out, (a, b), vjp)


def neg(a):
    if not isinstance(a, Tracked):
        return -a
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    if not isinstance(a, Tracked):
        return a**exponent
    av = a.value
    if exponent == 2:
        return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))
    return _record(
        "pow", av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),)
    )


def square(a):
    return power(a, 2)


def sqrt(a):
    if not isinstance(a, Tracked):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    if not isinstance(a, Tracked):
        return np.exp(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    if not isinstance(a, Tracked):
        return np.log(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    if not isinstance(a, Tracked):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def arctanh(a):
    if not isinstance(a, Tracked):
        return np.arctanh(a)
    av = a.value
    return _record("arctanh", np.arctanh(av), (a,), lambda g: (g / (1.0 - av * av),))


def arcsinh(a):
    if not isinstance(a, Tracked):
        return np.arcsinh(a)
    av = a.value
    return _record("arcsinh", np.arcsinh(av), (a,), lambda g: (g / np.sqrt(1.0 + av * av),))


def _sigmoid(x):
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    if not isinstance(a, Tracked):
        return _sigmoid(a)
    out = _sigmoid(a.value)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    """log(1 + e^a) evaluated without overflow."""
    if not isinstance(a, Tracked):
        return _softplus(a)
    av = a.value
    return _record("softplus", _softplus(av), (a,), lambda g: (g * _sigmoid(av),))


def _clamp(x, lo, hi):
    if lo is not None:
        x = np.maximum(x, lo)
    if hi is not None:
        x = np.minimum(x, hi)
    return x


def clip(a, lo=None, hi=None):
    """Clamp with derivative 1 inside [lo, hi] and 0 outside."""
    if not isinstance(a, Tracked):
        return _clamp(a, lo, hi)
    av = a.value
    out = _clamp(av, lo, hi)
    inside = out == av
    if inside.all():
        return _record("clip", out, (a,), lambda g: (g,))
    return _record("clip", out, (a,), lambda g: (g * inside,))


def custom(kind: str, value, inputs: Sequence, vjp):
    """Record a fused operation.

    ``vjp(g)`` returns one gradient per entry of ``inputs`` (``None`` for
    constants); gradients are summed back to each input's shape.
    """
    if not any(isinstance(x, Tracked) for x in inputs):
        return value
    shapes = [np.shape(value_of(x)) for x in inputs]
    tracked = [isinstance(x, Tracked) for x in inputs]

    def wrapped(g):
        return tuple(
            _unbroadcast(pg, shape) if (t and pg is not None) else None
            for pg, shape, t in zip(vjp(g), shapes, tracked)
        )

    return _record(kind, value, tuple(inputs), wrapped)


def where(cond, a, b):
    if not (isinstance(a, Tracked) or isinstance(b, Tracked)):
        return np.where(cond, a, b)
    cond = np.asarray(cond)
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = np.where(cond, av, bv)

    def vjp(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa),
            _unbroadcast(np.where(cond, 0.0, g), sb),
        )

    return _record("where", out, (a, b), vjp)


def stop_gradient(a):
    return value_of(a)


# ----------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):
    if not isinstance(a, Tracked):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.value
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b):
    """``a @ b`` with ``b`` at least 2-D (stacked rows times a weight matrix)."""
    if not (isinstance(a, Tracked) or isinstance(b, Tracked)):
        return a @ b
    av, bv = value_of(a), value_of(b)
    if np.ndim(bv) < 2 or np.ndim(av) < 1:
        raise ValueError("tracked matmul needs a (..., n) @ (n, m) layout")
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        ga = gb = None
        if isinstance(a, Tracked):
            if av.ndim == 1:
                ga = bv @ g
            else:
                ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa)
        if isinstance(b, Tracked):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:
                lhs = av.reshape(-1, sa[-1]) if bv.ndim == 2 else np.swapaxes(av, -1, -2)
                rhs = g.reshape(-1, g.shape[-1]) if bv.ndim == 2 else g
                gb = _unbroadcast(lhs.T @ rhs if bv.ndim == 2 else lhs @ rhs, sb)
        return ga, gb

    return _record("matmul", av @ bv, (a, b), vjp)


# -------------------------------------------------------------- shape plumbing


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index):
    if not isinstance(a, Tracked):
        return a[index]
    av = a.value
    shape, dtype = av.shape, av.dtype

    fancy = _is_fancy(index)

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _record("getitem", av[index], (a,), vjp)


def take(a, indices, axis=0):
    """Row gather (embedding lookup)."""
    if not isinstance(a, Tracked):
        return np.take(a, indices, axis=axis)
    if axis != 0:
        raise NotImplementedError("take only supports axis=0")
    av = a.value
    indices = np.asarray(indices)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, indices, g)
        return (out,)

    return _record("take", np.take(av, indices, axis=0), (a,), vjp)


def reshape(a, shape):
    if not isinstance(a, Tracked):
        return np.reshape(a, shape)
    old = a.value.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    """Swap the last two axes."""
    if not isinstance(a, Tracked):
        return np.swapaxes(a, -1, -2)
    return _record(
        "transpose", np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def expand_dims(a, axis):
    if not isinstance(a, Tracked):
        return np.expand_dims(a, axis)
    old = a.value.shape
    return _record(
        "expand_dims", np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(old),)
    )


def broadcast_to(a, shape):
    if not isinstance(a, Tracked):
        return np.broadcast_to(a, shape)
    old = a.value.shape
    return _record(
        "broadcast_to", np.broadcast_to(a.value, shape), (a,), lambda g: (_unbroadcast(g, old),)
    )


def concatenate(items: Sequence, axis=-1):
    if not any(isinstance(x, Tracked) for x in items):
        return np.concatenate(items, axis=axis)
    values = [value_of(x) for x in items]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concatenate", np.concatenate(values, axis=axis), tuple(items), vjp)


def stack(items: Sequence, axis=0):
    if not any(isinstance(x, Tracked) for x in items):
        return np.stack(items, axis=axis)
    values = [value_of(x) for x in items]
    n = len(values)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record("stack", np.stack(values, axis=axis), tuple(items), vjp)


# ------------------------------------------------------------------- backward


def backward(loss: Tracked) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every parameter watched on its tape.

    Parameters that were watched but do not influence the loss get zeros.
    Raises :class:`NumericError` naming the first node whose value or
    incoming gradient is non-finite.
    """
    if not isinstance(loss, Tracked):
        raise TypeError("loss is not tracked on a tape")
    if np.size(loss.value) != 1:
        raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
    tape = loss.tape
    nodes = tape.nodes
    last = loss.node_id
    if not np.all(np.isfinite(loss.value)):
        _raise_first_bad(nodes, last, None)

    grads: list = [None] * (last + 1)
    grads[last] = np.ones_like(loss.value)
    for i in range(last, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            prev = grads[pid]
            grads[pid] = pg if prev is None else prev + pg

    out = {}
    for node_id, param in tape.leaves.items():
        g = grads[node_id] if node_id <= last else None
        if g is None:
            g = np.zeros_like(param.value)
        elif not np.all(np.isfinite(g)):
            _raise_first_bad(nodes, last, grads)
        out[param.name] = np.array(g, dtype=np.float64).reshape(param.value.shape)
    return out


def _raise_first_bad(nodes, last, grads):
    # Only runs once something went wrong, so the full scans are affordable.
    for i in range(last + 1):
        if not np.all(np.isfinite(nodes[i].value)):
            raise NumericError(f"non-finite value at node {i} ({nodes[i].kind})")
    if grads is not None:
        for i in range(last, -1, -1):
            if grads[i] is not None and not np.all(np.isfinite(grads[i])):
                raise NumericError(f"non-finite gradient flowing into node {i} ({nodes[i].kind})")
    raise NumericError("non-finite loss")


def finite_diff_check(
    f: Callable[[], object],
    params: Iterable[Parameter],
    step: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    grads: Mapping[str, np.ndarray] | None = None,
    dtype=np.longdouble,
    directions: int = 0,
    order: int = 2,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads parameters through :func:`use`. The
    relative error per coordinate is |a - n| / max(1e-12, |a| + |n|).
    ``max_coords`` limits the number of coordinates probed per parameter
    (sampled with ``rng``); ``None`` probes all of them. ``directions`` adds
    that many random unit directions per parameter, comparing the directional
    derivative <grad, u> the same way.

    The differences are evaluated with the parameters cast to ``dtype``
    (extended precision by default) so that cancellation in ``f(x+h) -
    f(x-h)`` does not swamp small gradient entries. ``order=4`` switches from
    the two-point to the four-point central stencil, which tolerates points
    where the loss has large higher derivatives.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params = list(params)
    rng = rng or np.random.default_rng(0)
    if grads is None:
        with Tape():
            loss = f()
        grads = backward(loss)
    worst = 0.0
    saved = {p.name: p.value for p in params}
    try:
        for p in params:
            p.value = saved[p.name].astype(dtype)
        for p in params:
            flat_grad = np.asarray(grads.get(p.name, np.zeros(p.value.shape))).reshape(-1)
            coords = np.arange(p.value.size)
            if max_coords is not None and coords.size > max_coords:
                coords = rng.choice(coords.size, size=max_coords, replace=False)
            for c in coords:
                u = np.zeros(p.value.size)
                u[c] = 1.0
                worst = max(worst, _rel_err(flat_grad[c], _slope(f, p, u, step, order)))
            for _ in range(directions):
                u = rng.normal(size=p.value.size)
                u /= np.linalg.norm(u)
                worst = max(worst, _rel_err(float(flat_grad @ u), _slope(f, p, u, step, order)))
    finally:
        for p in params:
            p.value = saved[p.name]
    return worst


def _rel_err(a, n):
    return abs(a - n) / max(1e-12, abs(a) + abs(n))


def _slope(f, p, u, step, order):
    """Central-difference derivative of ``f`` along ``u`` in parameter ``p``."""
    base = p.value
    delta = u.reshape(base.shape).astype(base.dtype)

    def at(k):
        p.value = base + (k * step) * delta
        return value_of(f())

    try:
        if order == 2:
            return float((at(1) - at(-1)) / (2 * step))
        return float((8 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12 * step))
    finally:
        p.value = base
