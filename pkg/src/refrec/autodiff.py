"""Minimal reverse-mode differentiation over dense float64 matrices.

Every tensor is a 2-D ``Value``; operations build an acyclic graph and
``backward`` accumulates gradients in reverse topological order. The op set
is deliberately small: exactly what the training stages need (per-point MLPs,
pooling, softmax losses). Gradients accumulate additively, so callers must
``zero_grads`` between optimizer steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Value",
    "constant",
    "parameter",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "scale",
    "square",
    "relu",
    "tanh",
    "log",
    "softmax",
    "max_over_groups",
    "sum_all",
    "mean_all",
    "reshape",
    "rows",
    "cross_entropy",
    "backward",
    "zero_grads",
    "AdamWState",
    "adamw_step",
    "cosine_lr",
]

# Global switch: inside no_grad() blocks ops run forward-only and record no
# graph edges (used for teacher passes and evaluation).
_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Value:
    """A 2-D float64 matrix node in the computation graph.

    ``parents`` holds (Value, backward_rule) pairs; backward_rule takes the
    upstream gradient for this node and adds the local contribution into the
    parent's ``grad``. Gradient storage is materialized on first use so
    forward-only passes never allocate it.
    """

    __slots__ = ("data", "_grad", "requires_grad", "parents")

    def __init__(self, data, requires_grad=False, parents=()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"Value must be 2-D, got shape {arr.shape}")
        self.data = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _acc_owned(node: Value, contrib: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient contribution (safe to adopt)."""
    if node._grad is None:
        node._grad = contrib
    else:
        node._grad += contrib


def _acc_shared(node: Value, contrib: np.ndarray) -> None:
    """Accumulate a contribution the caller does not own (copied on adopt)."""
    if node._grad is None:
        node._grad = contrib.copy()
    else:
        node._grad += contrib


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def parameter(data) -> Value:
    return Value(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _make(data, parents):
    """Wire a result node; prunes edges when no parent needs gradients."""
    if _grad_enabled:
        parents = [(p, rule) for p, rule in parents if p.requires_grad or p.parents]
        if parents:
            return Value(data, requires_grad=True, parents=parents)
    return Value(data, requires_grad=False)


def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def da(g, a=a, b=b):
        _acc_owned(a, g @ b.data.T)

    def db(g, a=a, b=b):
        _acc_owned(b, a.data.T @ g)

    return _make(out_data, [(a, da), (b, db)])


def add(a: Value, b: Value) -> Value:
    """Elementwise add; also accepts a 1xC bias broadcast over rows of a."""
    if a.shape == b.shape:
        def da(g, a=a):
            _acc_shared(a, g)

        def db(g, b=b):
            _acc_shared(b, g)

        return _make(a.data + b.data, [(a, da), (b, db)])
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        def da(g, a=a):
            _acc_shared(a, g)

        def db(g, b=b):
            _acc_owned(b, g.sum(axis=0, keepdims=True))

        return _make(a.data + b.data, [(a, da), (b, db)])
    raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def da(g, a=a):
        _acc_shared(a, g)

    def db(g, b=b):
        _acc_owned(b, -g)

    return _make(a.data - b.data, [(a, da), (b, db)])


def scale(a: Value, c: float) -> Value:
    c = float(c)

    def da(g, a=a, c=c):
        _acc_owned(a, c * g)

    return _make(c * a.data, [(a, da)])


def square(a: Value) -> Value:
    def da(g, a=a):
        t = a.data * g
        t *= 2.0
        _acc_owned(a, t)

    return _make(a.data * a.data, [(a, da)])


def relu(a: Value) -> Value:
    mask = a.data > 0.0
    out_data = a.data * mask

    def da(g, a=a, mask=mask):
        _acc_owned(a, g * mask)

    return _make(out_data, [(a, da)])


def tanh(a: Value) -> Value:
    t = np.tanh(a.data)

    def da(g, a=a, t=t):
        d = 1.0 - t * t
        d *= g
        _acc_owned(a, d)

    return _make(t, [(a, da)])


def log(a: Value) -> Value:
    def da(g, a=a):
        _acc_owned(a, g / a.data)

    return _make(np.log(a.data), [(a, da)])


def softmax(a: Value) -> Value:
    """Row-wise softmax over the class axis, computed stably."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def da(g, a=a, s=s):
        dot = (g * s).sum(axis=1, keepdims=True)
        d = g - dot
        d *= s
        _acc_owned(a, d)

    return _make(s, [(a, da)])


def max_over_groups(a: Value, group_size: int) -> Value:
    """Max-pool contiguous row groups: (B*n, C) -> (B, C).

    Argmax row indices are recorded per (group, column); np.argmax breaks
    ties toward the lowest in-group row index.
    """
    r, c = a.shape
    if group_size <= 0 or r % group_size != 0:
        raise ValueError(f"rows {r} not divisible by group size {group_size}")
    b = r // group_size
    view = a.data.reshape(b, group_size, c)
    arg = view.argmax(axis=1)  # (b, c)
    out_data = np.take_along_axis(view, arg[:, None, :], axis=1)[:, 0, :]
    row_idx = (arg + (np.arange(b) * group_size)[:, None]).ravel()
    col_idx = np.tile(np.arange(c), b)

    def da(g, a=a, row_idx=row_idx, col_idx=col_idx):
        np.add.at(a.grad, (row_idx, col_idx), g.ravel())

    return _make(out_data, [(a, da)])


def sum_all(a: Value) -> Value:
    def da(g, a=a):
        if a._grad is None:
            a._grad = np.full_like(a.data, g[0, 0])
        else:
            a._grad += g[0, 0]

    return _make(a.data.sum(), [(a, da)])


def mean_all(a: Value) -> Value:
    n = a.data.size

    def da(g, a=a, n=n):
        if a._grad is None:
            a._grad = np.full_like(a.data, g[0, 0] / n)
        else:
            a._grad += g[0, 0] / n

    return _make(a.data.mean(), [(a, da)])


def reshape(a: Value, r: int, c: int) -> Value:
    if r * c != a.data.size:
        raise ValueError(f"cannot reshape {a.shape} to ({r}, {c})")

    def da(g, a=a):
        _acc_owned(a, g.reshape(a.data.shape).copy())

    return _make(a.data.reshape(r, c), [(a, da)])


def rows(a: Value, start: int, stop: int) -> Value:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ValueError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def da(g, a=a, start=start, stop=stop):
        a.grad[start:stop] += g

    return _make(a.data[start:stop].copy(), [(a, da)])


def cross_entropy(logits: Value, labels, weights=None) -> Value:
    """Mean (optionally per-sample weighted) cross-entropy from raw logits.

    Stable log-sum-exp form; gradient is weights/B * (softmax - onehot).
    """
    y = np.asarray(labels, dtype=np.intp)
    b, k = logits.shape
    if y.shape != (b,):
        raise ValueError(f"labels shape {y.shape} does not match batch {b}")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError("label index out of range")
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (b,):
        raise ValueError(f"weights shape {w.shape} does not match batch {b}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    per_sample = lse - z[np.arange(b), y]
    out_data = float((w * per_sample).mean())
    p = np.exp(z - m)
    p /= p.sum(axis=1, keepdims=True)

    def dlogits(g, logits=logits, p=p, y=y, w=w, b=b):
        d = p.copy()
        d[np.arange(b), y] -= 1.0
        d *= w[:, None]
        d *= g[0, 0] / b
        _acc_owned(logits, d)

    return _make(out_data, [(logits, dlogits)])


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into every reachable node's grad."""
    if root.shape != (1, 1):
        raise ValueError(f"backward root must be scalar-shaped (1x1), got {root.shape}")
    topo: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root._grad = np.ones_like(root.data)
    for node in reversed(topo):
        g = node.grad
        for parent, rule in node.parents:
            rule(g)


def zero_grads(params) -> None:
    for p in params:
        p._grad = None


@dataclass
class AdamWState:
    """Per-parameter-list moment state for decoupled-weight-decay Adam."""

    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    _scratch: list = field(default_factory=list, repr=False)

    def ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ValueError("optimizer state does not match parameter list")
        if not self._scratch:
            self._scratch = [np.empty_like(p.data) for p in params]


def adamw_step(params, state: AdamWState) -> None:
    """One AdamW update: decoupled decay first, then the moment-based step."""
    params = list(params)
    if not params:
        return
    state.ensure(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v, sc in zip(params, state.m, state.v, state._scratch):
        g = p.grad
        if state.weight_decay != 0.0:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=sc)
        m += sc
        v *= state.beta2
        np.multiply(g, g, out=sc)
        sc *= 1.0 - state.beta2
        v += sc
        np.divide(v, bc2, out=sc)
        np.sqrt(sc, out=sc)
        sc += state.eps
        np.divide(m, sc, out=sc)
        sc *= state.lr / bc1
        p.data -= sc


def cosine_lr(it: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 to 0 over [0, total], no restarts."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * it / total))
