"""Point-set distances with gradients, plus embedding-space queries.

Chamfer uses squared distances; EMD uses plain Euclidean distances so it is
a metric (exact minimum-cost perfect matching for small clouds, an
epsilon-suboptimal auction solver above the exact cap). Both losses treat
the per-evaluation pairing/matching as locally constant, which is the exact
subgradient almost everywhere.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .autodiff import Value, _make

EXACT_SOLVER_CAP = 512

_pool = None


def _worker_pool():
    """Shared thread pool for independent per-cloud solves; the assignment
    solver releases the GIL. REFREC_THREADS caps the worker count."""
    global _pool
    if _pool is None:
        try:
            cap = int(os.environ.get("REFREC_THREADS", "0"))
        except ValueError:
            cap = 0
        if cap <= 0:
            cap = min(4, os.cpu_count() or 1)
        _pool = ThreadPoolExecutor(max_workers=cap)
    return _pool


@dataclass
class Assignment:
    """Perfect matching between two equal-size clouds: permutation[i] is the
    target index matched to source point i."""

    permutation: np.ndarray
    cost: float


@dataclass
class EmbeddingTable:
    """Fixed-encoder global shape descriptors for a set of samples."""

    vectors: np.ndarray  # (M, d)
    ids: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("embedding vectors must be 2-D")
        if len(self.ids) != len(self.vectors):
            raise ValueError("ids and vectors length mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")

    def __len__(self):
        return len(self.ids)


# ---------------------------------------------------------------------------
# Chamfer

def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetrized mean squared nearest-neighbor distance."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty clouds")
    d2 = cdist(a, b, "sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _chamfer_grads(a, b):
    """Forward value and the nearest-neighbor index sets both directions."""
    d2 = cdist(a, b, "sqeuclidean")
    nn_ab = d2.argmin(axis=1)
    nn_ba = d2.argmin(axis=0)
    val = d2[np.arange(len(a)), nn_ab].mean() + d2[nn_ba, np.arange(len(b))].mean()
    return val, nn_ab, nn_ba


def chamfer_pair(a: Value, b: Value) -> Value:
    """Differentiable Chamfer between two cloud Values (n,3) and (m,3)."""
    val, nn_ab, nn_ba = _chamfer_grads(a.data, b.data)
    na, nb = len(a.data), len(b.data)

    def da(g, a=a, b=b, nn_ab=nn_ab, nn_ba=nn_ba, na=na, nb=nb):
        s = g[0, 0]
        a.grad += (2.0 * s / na) * (a.data - b.data[nn_ab])
        np.add.at(a.grad, nn_ba, (2.0 * s / nb) * (a.data[nn_ba] - b.data))

    def db(g, a=a, b=b, nn_ab=nn_ab, nn_ba=nn_ba, na=na, nb=nb):
        s = g[0, 0]
        b.grad += (2.0 * s / nb) * (b.data - a.data[nn_ba])
        np.add.at(b.grad, nn_ab, (2.0 * s / na) * (b.data[nn_ab] - a.data))

    return _make(np.array([[val]]), [(a, da), (b, db)])


def chamfer_loss(pred: Value, targets: np.ndarray) -> Value:
    """Mean Chamfer over a batch; pred rows are B clouds of m points flattened
    to (B*m, 3), targets is (B, n, 3)."""
    bsz, n_t, _ = targets.shape
    m = pred.shape[0] // bsz
    if m * bsz != pred.shape[0]:
        raise ValueError("pred rows not divisible by batch size")
    pv = pred.data.reshape(bsz, m, 3)
    total = 0.0
    nns = []
    for i in range(bsz):
        val, nn_ab, nn_ba = _chamfer_grads(pv[i], targets[i])
        total += val
        nns.append((nn_ab, nn_ba))

    def dpred(g, pred=pred, targets=targets, nns=nns, bsz=bsz, m=m, n_t=n_t):
        s = g[0, 0] / bsz
        gp = pred.grad.reshape(bsz, m, 3)
        pv = pred.data.reshape(bsz, m, 3)
        for i in range(bsz):
            nn_ab, nn_ba = nns[i]
            gp[i] += (2.0 * s / m) * (pv[i] - targets[i][nn_ab])
            np.add.at(gp[i], nn_ba, (2.0 * s / n_t) * (pv[i][nn_ba] - targets[i]))

    return _make(np.array([[total / bsz]]), [(pred, dpred)])


# ---------------------------------------------------------------------------
# Earth Mover's distance

def emd_exact(a: np.ndarray, b: np.ndarray, cap: int = EXACT_SOLVER_CAP) -> Assignment:
    """Minimum-cost perfect matching under Euclidean distances."""
    if len(a) != len(b):
        raise ValueError(f"EMD requires equal point counts, got {len(a)} vs {len(b)}")
    if len(a) > cap:
        raise ValueError(f"{len(a)} points exceeds exact solver cap {cap}; use emd_auction")
    d = cdist(a, b)
    rows, cols = linear_sum_assignment(d)
    perm = np.empty(len(a), dtype=np.intp)
    perm[rows] = cols
    return Assignment(permutation=perm, cost=float(d[rows, cols].sum()))


def emd_auction(
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float,
    scaling: float = 0.25,
    max_rounds: int = 2_000_000,
) -> Assignment:
    """Epsilon-suboptimal matching via the auction algorithm with
    epsilon-scaling; final cost is within n*epsilon of the optimum."""
    if len(a) != len(b):
        raise ValueError(f"EMD requires equal point counts, got {len(a)} vs {len(b)}")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    n = len(a)
    benefit = -cdist(a, b)  # maximize value = minimize cost
    spread = float(benefit.max() - benefit.min()) if n > 1 else 0.0
    eps = max(epsilon, spread / 2.0)
    prices = np.zeros(n)
    owner = np.full(n, -1, dtype=np.intp)  # item -> bidder
    rounds = 0
    while True:
        owner.fill(-1)
        item_of = np.full(n, -1, dtype=np.intp)  # bidder -> item
        while (item_of < 0).any():
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError("auction did not converge within the round cap")
            bidders = np.flatnonzero(item_of < 0)
            values = benefit[bidders] - prices[None, :]
            if n == 1:
                best_item = np.zeros(len(bidders), dtype=np.intp)
                bid = prices[0] + eps + np.zeros(len(bidders))
            else:
                top2 = np.argpartition(values, -2, axis=1)[:, -2:]
                v_top2 = np.take_along_axis(values, top2, axis=1)
                first = v_top2.argmax(axis=1)
                best_item = top2[np.arange(len(bidders)), first]
                v_best = v_top2[np.arange(len(bidders)), first]
                v_second = v_top2[np.arange(len(bidders)), 1 - first]
                bid = prices[best_item] + (v_best - v_second) + eps
            # highest bid per item wins; ties go to the lowest bidder index
            order = np.lexsort((bidders, -bid))
            seen = set()
            for k in order:
                item = best_item[k]
                if item in seen:
                    continue
                seen.add(item)
                prev = owner[item]
                if prev >= 0:
                    item_of[prev] = -1
                owner[item] = bidders[k]
                item_of[bidders[k]] = item
                prices[item] = bid[k]
        if eps <= epsilon:
            break
        eps = max(epsilon, eps * scaling)
    perm = item_of
    cost = float(cdist(a, b)[np.arange(n), perm].sum())
    return Assignment(permutation=perm, cost=cost)


def _emd_grad_pair(a, b, perm):
    """d(cost)/da and d(cost)/db for a fixed matching (zero at coincidence)."""
    diff = a - b[perm]
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    safe = np.where(dist > 0.0, dist, 1.0)
    ga = np.where(dist > 0.0, diff / safe, 0.0)
    gb = np.zeros_like(b)
    gb[perm] = -ga
    return ga, gb


def emd_cost_pair(a: Value, b: Value, cap: int = EXACT_SOLVER_CAP) -> Value:
    """Differentiable EMD loss (cost/n) between two cloud Values."""
    asg = emd_exact(a.data, b.data, cap=cap)
    n = len(a.data)
    ga, gb = _emd_grad_pair(a.data, b.data, asg.permutation)

    def da(g, a=a, ga=ga, n=n):
        a.grad += (g[0, 0] / n) * ga

    def db(g, b=b, gb=gb, n=n):
        b.grad += (g[0, 0] / n) * gb

    return _make(np.array([[asg.cost / n]]), [(a, da), (b, db)])


def emd_loss(pred: Value, targets: np.ndarray, cap: int = EXACT_SOLVER_CAP) -> Value:
    """Mean EMD loss over a batch; layout as in chamfer_loss. Point counts of
    prediction and target must match per cloud."""
    bsz, n_t, _ = targets.shape
    m = pred.shape[0] // bsz
    if m * bsz != pred.shape[0]:
        raise ValueError("pred rows not divisible by batch size")
    if m != n_t:
        raise ValueError(f"EMD requires equal point counts, got {m} vs {n_t}")
    pv = pred.data.reshape(bsz, m, 3)
    grads = np.empty_like(pv)
    assignments = list(
        _worker_pool().map(lambda i: emd_exact(pv[i], targets[i], cap=cap), range(bsz))
    )
    total = 0.0
    for i, asg in enumerate(assignments):  # fixed reduction order
        total += asg.cost / m
        grads[i], _ = _emd_grad_pair(pv[i], targets[i], asg.permutation)

    def dpred(g, pred=pred, grads=grads, bsz=bsz, m=m):
        s = g[0, 0] / (bsz * m)
        pred.grad += s * grads.reshape(-1, 3)

    return _make(np.array([[total / bsz]]), [(pred, dpred)])


# ---------------------------------------------------------------------------
# Embedding-space queries

def pairwise_l2(q: EmbeddingTable, r: EmbeddingTable) -> np.ndarray:
    """Exact Euclidean distance matrix between two tables."""
    if q.vectors.shape[1] != r.vectors.shape[1]:
        raise ValueError("embedding dimension mismatch")
    return cdist(q.vectors, r.vectors)


def nearest(query: np.ndarray, table: EmbeddingTable, k: int) -> list:
    """k nearest table entries by ascending distance, ties by ascending id."""
    if len(table) == 0:
        raise ValueError("nearest on an empty table")
    if k > len(table):
        raise ValueError(f"k={k} exceeds table size {len(table)}")
    d = cdist(np.asarray(query, dtype=np.float64).reshape(1, -1), table.vectors)[0]
    order = sorted(range(len(table)), key=lambda i: (d[i], table.ids[i]))
    return [(table.ids[i], float(d[i])) for i in order[:k]]
