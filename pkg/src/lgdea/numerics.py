"""Dense 2-D matrices and a small reverse-mode autodiff engine.

Matrices are plain ``float64`` numpy arrays with ``ndim == 2``.  A
:class:`DiffNode` wraps one such array together with a gradient slot and the
closures needed to push gradients to its parents.  Graphs are built fresh for
every forward pass and dropped afterwards.

Every loss in the package is composed from the operations below, so the
finite-difference checker :func:`check_gradients` is the single oracle that
validates all of them.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError, ParameterError, UsageError

KL_EPS = 1e-12
COS_EPS = 1e-12
NORM_EPS = 1e-12


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 matrix (scalars become 1x1)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


class DiffNode:
    """A matrix value in a differentiable computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "name", "info")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        value = as_matrix(value)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value in node {name or '<anon>'}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.requires_grad = bool(requires_grad)
        # only parents that need gradients are kept
        self.parents = tuple(p for p in parents if p[0].requires_grad)
        self.name = name
        self.info = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise UsageError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<DiffNode{tag} shape={self.value.shape} requires_grad={self.requires_grad}>"


def constant(x, name=None) -> DiffNode:
    return DiffNode(x, name=name)


def parameter(x, name=None) -> DiffNode:
    return DiffNode(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _node(value, parents):
    req = any(p.requires_grad for p, _ in parents)
    return DiffNode(value, parents, requires_grad=req)


def _lift(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else constant(x)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffNode:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _node(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> DiffNode:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    return _node(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> DiffNode:
    """Elementwise product of equally shaped nodes."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    return _node(a.value * b.value,
                 [(a, lambda g: g * b.value), (b, lambda g: g * a.value)])


def scale(a: DiffNode, c: float) -> DiffNode:
    c = float(c)
    return _node(a.value * c, [(a, lambda g: g * c)])


def square(a: DiffNode) -> DiffNode:
    return _node(a.value * a.value, [(a, lambda g: 2.0 * a.value * g)])


def log(a: DiffNode, eps: float = 0.0) -> DiffNode:
    """log(a + eps); inputs must stay above -eps."""
    shifted = a.value + eps
    if np.any(shifted <= 0):
        raise NumericError("log of non-positive value")
    return _node(np.log(shifted), [(a, lambda g: g / shifted)])


def add_row(x: DiffNode, b: DiffNode) -> DiffNode:
    """Add a 1 x d row to every row of an n x d matrix."""
    if b.shape[0] != 1 or b.shape[1] != x.shape[1]:
        raise DimensionError(f"add_row: {x.shape} + {b.shape}")
    return _node(x.value + b.value,
                 [(x, lambda g: g), (b, lambda g: g.sum(axis=0, keepdims=True))])


# ---------------------------------------------------------------- reductions

def sum_all(a: DiffNode) -> DiffNode:
    return _node(np.array([[a.value.sum()]]),
                 [(a, lambda g: np.full_like(a.value, g[0, 0]))])


def mean_all(a: DiffNode) -> DiffNode:
    n = a.value.size
    return scale(sum_all(a), 1.0 / n)


def row_sums(a: DiffNode) -> DiffNode:
    return _node(a.value.sum(axis=1, keepdims=True),
                 [(a, lambda g: np.broadcast_to(g, a.value.shape).copy())])


def segment_mean(x: DiffNode, lengths: Sequence[int]) -> DiffNode:
    """Mean over consecutive row segments of the given (positive) lengths."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0 or np.any(lengths <= 0) or lengths.sum() != x.shape[0]:
        raise DimensionError(f"segment_mean: lengths {lengths.tolist()} vs {x.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    counts = lengths.astype(np.float64)[:, None]
    out = np.add.reduceat(x.value, starts, axis=0) / counts

    def back(g):
        return np.repeat(g / counts, lengths, axis=0)

    return _node(out, [(x, back)])


# ---------------------------------------------------------------- structure

def matmul(a, b) -> DiffNode:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return _node(a.value @ b.value,
                 [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)])


def transpose(a: DiffNode) -> DiffNode:
    return _node(np.ascontiguousarray(a.value.T), [(a, lambda g: g.T)])


def gather_rows(table: DiffNode, index) -> DiffNode:
    """Rows ``table[index]``; the backward pass scatter-adds into the table."""
    index = np.ascontiguousarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise DimensionError("gather_rows: index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError("gather_rows: index out of range")

    def back(g):
        out = np.zeros_like(table.value)
        _kernels.scatter_add_rows(out, index, g)
        return out

    return _node(table.value[index], [(table, back)])


def tile_rows(x: DiffNode, times: int) -> DiffNode:
    """Stack ``times`` copies of ``x`` vertically."""
    n = x.shape[0]
    return _node(np.tile(x.value, (times, 1)),
                 [(x, lambda g: g.reshape(times, n, -1).sum(axis=0))])


def concat_rows(nodes: Sequence[DiffNode]) -> DiffNode:
    sizes = [n.shape[0] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    parents = [(n, (lambda g, s=s, e=e: g[s:e])) for n, s, e in zip(nodes, bounds[:-1], bounds[1:])]
    return _node(np.concatenate([n.value for n in nodes], axis=0), parents)


def stopgrad(x: DiffNode) -> DiffNode:
    """Same value, no gradient path."""
    return DiffNode(x.value, requires_grad=False, name=x.name)


# ---------------------------------------------------------------- softmax family

def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(x, tau: float = 1.0) -> DiffNode:
    _check_tau(tau)
    x = _lift(x)
    s = _softmax_np(x.value / tau)

    def back(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True)) / tau

    return _node(s, [(x, back)])


def row_log_softmax(x, tau: float = 1.0) -> DiffNode:
    _check_tau(tau)
    x = _lift(x)
    z = x.value / tau
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True)) / tau

    return _node(out, [(x, back)])


def l2_normalize_rows(x: DiffNode, eps: float = NORM_EPS) -> DiffNode:
    """x / sqrt(|x|^2 + eps^2) per row; a zero row stays zero."""
    d = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True) + eps * eps)
    y = x.value / d

    def back(g):
        return g / d - y * (g * y).sum(axis=1, keepdims=True) / d

    out = _node(y, [(x, back)])
    out.info = {"degenerate": (d[:, 0] < 1e-8)}
    return out


def block_attention(q: DiffNode, k: DiffNode, v: DiffNode, n_blocks: int,
                    tau: float) -> DiffNode:
    """Independent softmax attention inside each of ``n_blocks`` row blocks.

    ``q`` holds n_blocks*lq rows, ``k`` and ``v`` n_blocks*lk rows; block b of
    the output is softmax(q_b k_b^T / tau) v_b.  Attention weights are kept in
    ``out.info["weights"]`` with shape (n_blocks, lq, lk).
    """
    _check_tau(tau)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: query dim {q.shape[1]} vs key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: {k.shape[0]} keys vs {v.shape[0]} values")
    if n_blocks < 1 or q.shape[0] % n_blocks or k.shape[0] % n_blocks:
        raise DimensionError(f"attention: rows not divisible into {n_blocks} blocks")
    nb = n_blocks
    lq, lk = q.shape[0] // nb, k.shape[0] // nb
    q3 = q.value.reshape(nb, lq, -1)
    k3 = k.value.reshape(nb, lk, -1)
    v3 = v.value.reshape(nb, lk, -1)
    a = _softmax_np(np.matmul(q3, k3.transpose(0, 2, 1)) / tau)
    out = np.matmul(a, v3).reshape(nb * lq, -1)
    cache = {}

    def grad_scores(g):
        if "gs" not in cache:
            g3 = g.reshape(nb, lq, -1)
            ga = np.matmul(g3, v3.transpose(0, 2, 1))
            cache["gs"] = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) / tau
        return cache["gs"]

    def back_q(g):
        return np.matmul(grad_scores(g), k3).reshape(q.shape)

    def back_k(g):
        return np.matmul(grad_scores(g).transpose(0, 2, 1), q3).reshape(k.shape)

    def back_v(g):
        return np.matmul(a.transpose(0, 2, 1), g.reshape(nb, lq, -1)).reshape(v.shape)

    node = _node(out, [(q, back_q), (k, back_k), (v, back_v)])
    node.info = {"weights": a}
    return node


def attention(q, k, v, tau: float) -> DiffNode:
    """softmax(q k^T / tau) v for a single block."""
    return block_attention(_lift(q), _lift(k), _lift(v), 1, tau)


# ---------------------------------------------------------------- divergences

def kl_rows(p, q, eps: float = KL_EPS) -> DiffNode:
    """Per-row KL(p_i || q_i) = sum_k p (log(p+eps) - log(q+eps)), as n x 1."""
    p, q = _lift(p), _lift(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl: {p.shape} vs {q.shape}")
    if not eps > 0:
        raise ParameterError("kl eps must be positive")
    diff = sub(log(p, eps), log(q, eps))
    return row_sums(mul(p, diff))


def kl_divergence(p, q, eps: float = KL_EPS) -> DiffNode:
    """KL summed over rows, as a 1 x 1 node."""
    return sum_all(kl_rows(p, q, eps))


# ---------------------------------------------------------------- plain matrices

def cosine_rows(a, b, eps: float = COS_EPS) -> np.ndarray:
    """Pairwise cosine between the rows of ``a`` and ``b``."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_rows: {a.shape} vs {b.shape}")
    na = np.sqrt((a * a).sum(axis=1, keepdims=True))
    nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
    c = (a / np.maximum(na, eps)) @ (b / np.maximum(nb, eps)).T
    return np.clip(c, -1.0, 1.0)


def softmax(x, tau: float = 1.0) -> np.ndarray:
    """Row softmax on a plain matrix (no graph)."""
    _check_tau(tau)
    return _softmax_np(as_matrix(x) / tau)


# ---------------------------------------------------------------- backward

def _topo(root: DiffNode):
    order, seen = [], set()
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DiffNode) -> None:
    """Accumulate d loss / d node into ``.grad`` of every reachable node.

    Leaf gradients add to whatever is already stored; callers zero them
    between steps.
    """
    if loss.value.shape != (1, 1):
        raise UsageError(f"backward needs a 1x1 loss, got {loss.value.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.parents:
            node.grad = g
        else:
            node.grad = node.grad + g
        for parent, fn in node.parents:
            pg = fn(g)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- detach cache

class DetachCache:
    """Records values severed from the graph so they can be replayed.

    In ``record`` mode :meth:`detach` returns a constant copy of the node's
    value and remembers it under ``key``; in ``replay`` mode it returns the
    remembered value whatever the node now holds.  Replaying lets a
    finite-difference check hold stop-gradient branches fixed while the
    parameters move.
    """

    def __init__(self):
        self.values = {}
        self.replay = False

    def detach(self, key, node: DiffNode) -> DiffNode:
        return constant(self.value(key, node.value))

    def value(self, key, current):
        if self.replay:
            if key not in self.values:
                raise UsageError(f"detach cache has no entry {key!r}")
            return self.values[key]
        self.values[key] = current
        return current

    def freeze(self):
        self.replay = True
        return self


# ---------------------------------------------------------------- gradient check

def check_gradients(loss_fn: Callable[[], DiffNode], params: Iterable[DiffNode],
                    step: float = 1e-5, max_coords: int | None = None,
                    seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is |analytic - fd| / max(1, |fd|).  ``loss_fn``
    must be deterministic and rebuild its graph from the current parameter
    values on every call.  With ``max_coords`` set, that many coordinates per
    parameter block are sampled (seeded) instead of checking all of them.
    """
    if not 0 < step <= 1e-2:
        raise ParameterError(f"step must lie in (0, 1e-2], got {step}")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = loss_fn().item()
            flat[c] = orig - step
            down = loss_fn().item()
            flat[c] = orig
            fd = (up - down) / (2 * step)
            err = abs(grad.reshape(-1)[c] - fd) / max(1.0, abs(fd))
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    return worst
