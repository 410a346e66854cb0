"""Independent reference implementations used to check the real ones.

Everything here is deliberately naive: straight loops, exhaustive
enumeration, central finite differences. None of it imports the code paths
it verifies beyond the data containers.
"""

import itertools

import numpy as np


def finite_diff(f, arrays, h=1e-6):
    """Central-difference gradients of scalar f() wrt arrays mutated in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_emd(a, b):
    """Exhaustive minimum over all perfect matchings (tiny clouds only)."""
    n = len(a)
    best_cost = np.inf
    best_perm = None
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    for perm in itertools.permutations(range(n)):
        cost = sum(d[i, perm[i]] for i in range(n))
        if cost < best_cost:
            best_cost = cost
            best_perm = perm
    return np.array(best_perm), best_cost


def brute_chamfer(a, b):
    total_ab = 0.0
    for p in a:
        total_ab += min(((p - q) ** 2).sum() for q in b)
    total_ba = 0.0
    for q in b:
        total_ba += min(((p - q) ** 2).sum() for p in a)
    return total_ab / len(a) + total_ba / len(b)


def brute_pairwise_l2(q, r):
    out = np.zeros((len(q), len(r)))
    for i in range(len(q)):
        for j in range(len(r)):
            out[i, j] = np.sqrt(((q[i] - r[j]) ** 2).sum())
    return out


def brute_nearest(query, vectors, ids, k):
    d = [np.sqrt(((query - v) ** 2).sum()) for v in vectors]
    order = sorted(range(len(ids)), key=lambda i: (d[i], ids[i]))
    return [(ids[i], d[i]) for i in order[:k]]


def straight_line_mlp(layers, x, relu_all=True):
    """Plain-loop affine/ReLU forward; layers are (W, b) ndarray pairs."""
    h = np.asarray(x, dtype=np.float64)
    for li, (w, b) in enumerate(layers):
        h = h @ w + b
        if relu_all or li < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def brute_mutual_nn(e_vecs, e_ids, h_vecs, h_ids):
    """Reciprocal nearest-neighbor pairs between two sets, ties by id."""

    def nn(src, dst_vecs, dst_ids):
        d = [np.sqrt(((src - v) ** 2).sum()) for v in dst_vecs]
        order = sorted(range(len(dst_ids)), key=lambda i: (d[i], dst_ids[i]))
        return order[0]

    pairs = []
    nn_of_e = {e_ids[i]: h_ids[nn(e_vecs[i], h_vecs, h_ids)] for i in range(len(e_ids))}
    nn_of_h = {h_ids[j]: e_ids[nn(h_vecs[j], e_vecs, e_ids)] for j in range(len(h_ids))}
    for e_id in e_ids:
        h_id = nn_of_e[e_id]
        if nn_of_h[h_id] == e_id:
            pairs.append((e_id, h_id))
    return pairs


def brute_knn_vote(h_vec, e_vecs, e_ids, e_labels, k):
    """k-NN strict-majority vote with nearest-neighbor fallback."""
    d = [np.sqrt(((h_vec - v) ** 2).sum()) for v in e_vecs]
    order = sorted(range(len(e_ids)), key=lambda i: (d[i], e_ids[i]))[:k]
    votes = {}
    for i in order:
        votes[e_labels[i]] = votes.get(e_labels[i], 0) + 1
    top_label, top_count = max(votes.items(), key=lambda kv: kv[1])
    if top_count > k / 2:
        return top_label
    return e_labels[order[0]]


def confusion_accuracy(preds, truths, k):
    """Overall accuracy and per-class recall via an explicit confusion matrix."""
    cm = np.zeros((k, k), dtype=int)
    for p, t in zip(preds, truths):
        cm[t, p] += 1
    overall = np.trace(cm) / cm.sum()
    per_class = np.full(k, np.nan)
    for c in range(k):
        row = cm[c].sum()
        if row:
            per_class[c] = cm[c, c] / row
    return overall, per_class
