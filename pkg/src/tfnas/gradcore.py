"""Minimal reverse-mode gradient engine over float64 numpy arrays.

A graph is built fresh for every step: each operation returns a new
:class:`Node` holding its forward value and a closure that maps the
upstream gradient to gradients for its inputs.  :func:`backward` walks the
reachable nodes in reverse creation order, which is a valid reverse
topological order because inputs always exist before the nodes using them.

Supported shapes are deliberately narrow: scalars ``()``, vectors ``(n,)``
and row batches ``(B, n)``.  Binary elementwise ops accept equal shapes,
a scalar operand, or a vector broadcast across the rows of a batch.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidShapeError, OracleInvalidError

GradientMap = Dict[int, np.ndarray]

_ids = itertools.count()


class Node:
    __slots__ = ("id", "op", "inputs", "value", "requires_grad", "_backward")

    def __init__(self, value, op="leaf", inputs=(), backward_fn=None, requires_grad=False):
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise FloatingPointError(f"non-finite value produced by {op!r}")
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"


def _check_dims(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise InvalidShapeError(f"invalid shape {shape}")
    return shape


def array_init(shape, kind="zeros", *, c=0.0, low=0.0, high=1.0, fan_in=None,
               seed=0, rng=None) -> np.ndarray:
    """Allocate a float64 array.

    ``kind`` is one of ``zeros``, ``constant`` (fill with ``c``),
    ``uniform`` (on ``[low, high)``) or ``scaled_normal`` (standard normal
    scaled by ``1/sqrt(fan_in)``).  Random kinds draw from ``rng`` when given,
    otherwise from a fresh generator seeded with ``seed``.
    """
    shape = _check_dims(shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "constant":
        return np.full(shape, float(c))
    gen = rng if rng is not None else np.random.default_rng(seed)
    if kind == "uniform":
        return gen.uniform(low, high, size=shape)
    if kind == "scaled_normal":
        if fan_in is None:
            fan_in = shape[-1]
        return gen.standard_normal(shape) / math.sqrt(fan_in)
    raise InvalidArgumentError(f"unknown init kind {kind!r}")


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, inputs, backward_fn) -> Node:
    rg = any(i.requires_grad for i in inputs)
    return Node(value, op, inputs, backward_fn if rg else None, rg)


def _broadcast_kind(a_shape, b_shape):
    if a_shape == b_shape:
        return "same"
    if b_shape == ():
        return "b_scalar"
    if a_shape == ():
        return "a_scalar"
    if len(a_shape) == 2 and len(b_shape) == 1 and a_shape[1] == b_shape[0]:
        return "b_row"
    if len(b_shape) == 2 and len(a_shape) == 1 and b_shape[1] == a_shape[0]:
        return "a_row"
    raise InvalidShapeError(f"incompatible shapes {a_shape} and {b_shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ---------------------------------------------------------------- primitives


def matvec(w, x) -> Node:
    """``[m, n] . [n] -> [m]``; a batch ``[B, n]`` maps to ``[B, m]``."""
    w, x = _as_node(w), _as_node(x)
    if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise InvalidShapeError(f"matvec shapes {w.shape} and {x.shape}")
    W, X = w.value, x.value
    batched = X.ndim == 2
    out = X @ W.T if batched else W @ X

    def back(g):
        if batched:
            return g.T @ X, g @ W
        return np.outer(g, X), W.T @ g

    return _make(out, "matvec", (w, x), back)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_kind(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_kind(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_kind(a.shape, b.shape)
    A, B = a.value, b.value

    def back(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _make(A * B, "mul_elementwise", (a, b), back)


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Node:
    a = _as_node(a)
    s = _sigmoid(np.atleast_1d(a.value)).reshape(a.shape)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def swish(a) -> Node:
    a = _as_node(a)
    x = a.value
    s = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    return _make(x * s, "swish", (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def activation(a, kind: str) -> Node:
    if kind == "relu":
        return relu(a)
    if kind == "swish":
        return swish(a)
    raise InvalidArgumentError(f"unknown activation {kind!r}")


def mean(a) -> Node:
    a = _as_node(a)
    n = a.value.size
    shape = a.shape
    return _make(np.asarray(a.value.mean()), "mean", (a,),
                 lambda g: (np.full(shape, float(g) / n),))


def sum_all(a) -> Node:
    a = _as_node(a)
    shape = a.shape
    return _make(np.asarray(a.value.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def log(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0):
        raise InvalidArgumentError("log of a non-positive value")
    x = a.value
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def exp(a) -> Node:
    a = _as_node(a)
    e = np.exp(a.value)
    return _make(e, "exp", (a,), lambda g: (g * e,))


def dot(a, b) -> Node:
    """Inner product of two vectors, returning a scalar."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 1 or a.shape != b.shape:
        raise InvalidShapeError(f"dot shapes {a.shape} and {b.shape}")
    A, B = a.value, b.value
    return _make(np.asarray(A @ B), "dot", (a, b), lambda g: (g * B, g * A))


def take(a, rows=None, cols=None) -> Node:
    """Gather ``a[rows]`` (vector or matrix) or ``a[rows][:, cols]`` (matrix)."""
    a = _as_node(a)
    shape = a.shape
    if cols is None:
        idx = np.asarray(rows)
        out = a.value[idx]

        distinct = idx.ndim == 0 or bool(np.all(np.diff(idx) > 0))

        def back(g):
            full = np.zeros(shape)
            if distinct:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)
    else:
        r = np.arange(shape[0]) if rows is None else np.asarray(rows)
        c = np.asarray(cols)
        ix = np.ix_(r, c)
        out = a.value[ix]

        def back(g):
            full = np.zeros(shape)
            full[ix] += g
            return (full,)

    return _make(out, "take", (a,), back)


def concat(parts: Sequence) -> Node:
    parts = [_as_node(p) for p in parts]
    if any(p.value.ndim != 1 for p in parts):
        raise InvalidShapeError("concat expects vectors")
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts]), "concat", parts, back)


def stack(scalars: Sequence) -> Node:
    """Pack scalar nodes into a vector."""
    parts = [_as_node(p) for p in scalars]
    if not parts or any(p.value.ndim != 0 for p in parts):
        raise InvalidShapeError("stack expects one or more scalars")
    n = len(parts)
    return _make(np.array([p.value for p in parts]), "stack", parts,
                 lambda g: tuple(np.asarray(g[i]) for i in range(n)))


def stop_gradient(a) -> Node:
    return constant(_as_node(a).value.copy())


def straight_through(u, index: int) -> Node:
    """Scalar with forward value exactly 1 whose gradient flows into ``u[index]``.

    Equivalent to ``1 + u[index] - stop_gradient(u[index])``.
    """
    u = _as_node(u)
    n = u.shape[0]

    def back(g):
        full = np.zeros(n)
        full[index] = float(g)
        return (full,)

    return _make(np.asarray(1.0), "straight_through", (u,), back)


def softmax(v, temperature: float = 1.0) -> Node:
    """Softmax of a vector at the given temperature (max-subtracted)."""
    v = _as_node(v)
    if v.value.ndim != 1:
        raise InvalidShapeError(f"softmax expects a vector, got {v.shape}")
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    tau = float(temperature)
    z = (v.value - v.value.max()) / tau
    e = np.exp(z)
    y = e / e.sum()

    def back(g):
        return (y * (g - g @ y) / tau,)

    return _make(y, "softmax", (v,), back)


def weighted_sum(weights, terms: Sequence) -> Node:
    """``sum_i weights[i] * terms[i]`` for equally shaped terms."""
    w = _as_node(weights)
    terms = [_as_node(t) for t in terms]
    if w.value.ndim != 1 or w.shape[0] != len(terms):
        raise InvalidShapeError(f"weights {w.shape} for {len(terms)} terms")
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise InvalidShapeError("weighted_sum terms differ in shape")
    W = w.value
    out = W[0] * terms[0].value
    for i in range(1, len(terms)):
        out = out + W[i] * terms[i].value

    def back(g):
        gw = np.array([np.sum(g * t.value) for t in terms])
        return (gw,) + tuple(W[i] * g for i in range(len(terms)))

    return _make(out, "weighted_sum", (w, *terms), back)


def normalize(a, eps: float = 1e-5) -> Node:
    """Zero-mean, unit-variance rescaling along the last axis (no learned affine)."""
    a = _as_node(a)
    x = a.value
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, "normalize", (a,), back)


def _log_softmax_rows(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy_smoothed(logits, label, epsilon: float = 0.0) -> Node:
    """Label-smoothed cross entropy ``-sum_c q_c log p_c``.

    ``logits`` may be a vector with an integer ``label`` or a ``[B, K]``
    batch with an integer label array, in which case the batch mean is
    returned.
    """
    logits = _as_node(logits)
    if not 0.0 <= epsilon < 1.0:
        raise InvalidArgumentError(f"epsilon must lie in [0, 1), got {epsilon}")
    z = logits.value
    if z.ndim not in (1, 2):
        raise InvalidShapeError(f"logits must be rank 1 or 2, got {z.shape}")
    k = z.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if z.ndim == 1 and labels.size != 1:
        raise InvalidShapeError("one label expected for a single logit vector")
    if z.ndim == 2 and labels.shape != (z.shape[0],):
        raise InvalidShapeError("label array does not match the batch")
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise InvalidArgumentError(f"label out of range for {k} classes")
    Z = np.atleast_2d(z)
    q = np.full(Z.shape, epsilon / k)
    q[np.arange(Z.shape[0]), labels] += 1.0 - epsilon
    logp = _log_softmax_rows(Z)
    n = Z.shape[0]
    loss = -(q * logp).sum() / n
    p = np.exp(logp)
    shape = z.shape

    def back(g):
        return ((float(g) * (p - q) / n).reshape(shape),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), back)


_PRIMITIVES = {
    "matvec": matvec,
    "add": add,
    "mul_elementwise": mul,
    "relu": relu,
    "swish": swish,
    "sigmoid": sigmoid,
    "mean": mean,
    "scale": scale,
}


def forward_primitive(op_tag: str, *inputs, **kwargs) -> Node:
    """Dispatch one of the named primitive operations."""
    try:
        fn = _PRIMITIVES[op_tag]
    except KeyError:
        raise InvalidArgumentError(f"unknown primitive {op_tag!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def backward(root: Node, wrt: Optional[Iterable[Node]] = None) -> GradientMap:
    """Gradients of a scalar ``root`` with respect to every reachable leaf.

    Leaves listed in ``wrt`` that the root does not depend on get zero
    gradients; without ``wrt`` only reachable trainable leaves appear.
    """
    if root.value.shape != ():
        raise InvalidArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    seen = set()
    order: List[Node] = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen.add(n.id)
        order.append(n)
        stack.extend(n.inputs)
    order.sort(key=lambda n: n.id, reverse=True)

    grads: Dict[int, np.ndarray] = {root.id: np.asarray(1.0)}
    leaves: GradientMap = {}
    for n in order:
        g = grads.pop(n.id, None)
        if g is None:
            continue
        if n._backward is None:
            leaves[n.id] = g
            continue
        for inp, gi in zip(n.inputs, n._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    if wrt is not None:
        for p in wrt:
            if p.id not in leaves:
                leaves[p.id] = np.zeros(p.shape)
    return leaves


def grad_check(f: Callable[[], Node], params: Sequence[Node], step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current values of ``params`` and must
    be deterministic.  Relative error is ``|a - n| / max(1, |n|)``.
    """
    if not step > 0:
        raise InvalidArgumentError("step must be positive")
    first = f()
    second = f()
    if first.value.shape != ():
        raise InvalidArgumentError("grad_check needs a scalar-valued function")
    if first.item() != second.item():
        raise OracleInvalidError("function is not deterministic between evaluations")
    analytic = backward(first, wrt=params)
    worst = 0.0
    for p in params:
        original = p.value
        flat = original.reshape(-1)
        ga = analytic[p.id].reshape(-1)
        for k in range(flat.size):
            plus = flat.copy()
            plus[k] += step
            p.value = plus.reshape(original.shape)
            fp = f().item()
            minus = flat.copy()
            minus[k] -= step
            p.value = minus.reshape(original.shape)
            fm = f().item()
            p.value = original
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(ga[k] - numeric) / max(1.0, abs(numeric)))
    return worst
