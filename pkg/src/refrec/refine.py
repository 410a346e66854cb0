"""Stage 2: offline pseudo-label refinement in the frozen autoencoder
descriptor space.

Per predicted class, the most confident fraction of samples forms the easy
split E; the rest form H. H members that are reciprocal nearest neighbors
of an E member (single pass, decided on the original sets) inherit that
member's label and join the refined easy split; every remaining H member is
relabeled by a strict-majority vote over its K nearest refined-easy
neighbors, falling back to the single nearest neighbor when there is no
consensus. No confidence thresholds anywhere — only the fraction g and K.

The refinement interface accepts exactly one embedding table, which must
come from the reconstruction encoder; classifier features never enter here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metricspace import EmbeddingTable, pairwise_l2
from .warmup import PseudoLabelState


@dataclass
class SplitSets:
    E: set = field(default_factory=set)
    H: set = field(default_factory=set)
    E_refined: set = field(default_factory=set)
    H_refined: set = field(default_factory=set)


def _normalized_table(emb: EmbeddingTable, metric: str) -> EmbeddingTable:
    if metric == "euclidean":
        return emb
    if metric == "cosine":
        v = emb.vectors
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return EmbeddingTable(v / norms, list(emb.ids))
    raise ValueError(f"unknown refine metric '{metric}'")


def split_easy_hard(
    pls: PseudoLabelState, g: float, num_classes: int | None = None
) -> tuple[SplitSets, dict]:
    """Class-wise top-g% confidence split; ties broken by ascending id."""
    if not 0.0 < g < 1.0:
        raise ValueError("easy fraction g must be in (0, 1)")
    splits = SplitSets()
    warnings = []
    by_class: dict[int, list] = {}
    for r in pls.records:
        by_class.setdefault(r.label, []).append(r)
    all_classes = sorted(by_class)
    per_class = {}
    for c in all_classes:
        group = by_class[c]
        n_take = max(1, math.ceil(g * len(group)))
        ranked = sorted(group, key=lambda r: (-r.confidence, r.sample_id))
        for r in ranked[:n_take]:
            r.split = "E"
            splits.E.add(r.sample_id)
        for r in ranked[n_take:]:
            r.split = "H"
            splits.H.add(r.sample_id)
        per_class[int(c)] = {"easy": n_take, "hard": len(group) - n_take}
    k = num_classes if num_classes is not None else (max(all_classes) + 1 if all_classes else 0)
    for c in range(k):
        if c not in by_class:
            warnings.append(f"class {c} has no pseudo-labeled samples; empty easy split")
    report = {"per_class": per_class, "warnings": warnings}
    return splits, report


def _nn_indices(dist_row: np.ndarray, ids: list) -> int:
    """Index of the minimum distance, ties resolved by ascending id."""
    best = np.flatnonzero(dist_row == dist_row.min())
    if len(best) == 1:
        return int(best[0])
    return int(min(best, key=lambda i: ids[i]))


def reciprocal_expand(
    splits: SplitSets, pls: PseudoLabelState, emb: EmbeddingTable
) -> tuple[list, set]:
    """Single-pass mutual-nearest-neighbor expansion of the easy split.

    Matching is decided entirely on the original E/H sets; moved samples
    take the label of their easy partner. Returns (moved pairs, remaining H).
    """
    if not splits.E or not splits.H:
        raise ValueError("reciprocal expansion needs non-empty E and H")
    by_id = pls.by_id()
    vec_by_id = {sid: emb.vectors[i] for i, sid in enumerate(emb.ids)}
    e_ids = sorted(splits.E)
    h_ids = sorted(splits.H)
    e_table = EmbeddingTable(np.stack([vec_by_id[i] for i in e_ids]), e_ids)
    h_table = EmbeddingTable(np.stack([vec_by_id[i] for i in h_ids]), h_ids)
    d = pairwise_l2(e_table, h_table)

    nn_in_h = {e_ids[i]: h_ids[_nn_indices(d[i], h_ids)] for i in range(len(e_ids))}
    nn_in_e = {h_ids[j]: e_ids[_nn_indices(d[:, j], e_ids)] for j in range(len(h_ids))}

    moved = []
    for e_id in e_ids:
        h_id = nn_in_h[e_id]
        if nn_in_e[h_id] == e_id:
            rec = by_id[h_id]
            rec.label = by_id[e_id].label
            rec.split = "E_refined"
            rec.provenance = "reciprocal"
            moved.append((e_id, h_id))
    moved_ids = {h for _, h in moved}
    for e_id in e_ids:
        by_id[e_id].split = "E_refined"
    splits.E_refined = splits.E | moved_ids
    remaining = splits.H - moved_ids
    return moved, remaining


def knn_vote(
    h_ids: set,
    splits: SplitSets,
    pls: PseudoLabelState,
    emb: EmbeddingTable,
    k: int,
) -> dict:
    """Relabel every remaining hard sample by majority vote over its k
    nearest refined-easy neighbors (nearest single neighbor on ties)."""
    by_id = pls.by_id()
    vec_by_id = {sid: emb.vectors[i] for i, sid in enumerate(emb.ids)}
    e_ids = sorted(splits.E_refined)
    warnings = []
    if k > len(e_ids):
        warnings.append(
            f"vote size {k} exceeds refined easy split ({len(e_ids)}); using k={len(e_ids)}"
        )
        k = len(e_ids)
    e_labels = [by_id[i].label for i in e_ids]
    e_mat = EmbeddingTable(np.stack([vec_by_id[i] for i in e_ids]), e_ids)
    consensus = 0
    ordered_h = sorted(h_ids)
    if ordered_h:
        h_mat = EmbeddingTable(np.stack([vec_by_id[i] for i in ordered_h]), ordered_h)
        d = pairwise_l2(h_mat, e_mat)
        for j, h_id in enumerate(ordered_h):
            order = sorted(range(len(e_ids)), key=lambda i: (d[j, i], e_ids[i]))[:k]
            votes: dict[int, int] = {}
            for i in order:
                votes[e_labels[i]] = votes.get(e_labels[i], 0) + 1
            top_label, top_count = max(votes.items(), key=lambda kv: kv[1])
            rec = by_id[h_id]
            if top_count > k / 2:
                rec.label = top_label
                consensus += 1
            else:
                rec.label = e_labels[order[0]]
            rec.split = "H_refined"
            rec.provenance = "knn_vote"
    splits.H_refined = set(ordered_h)
    return {
        "voted": len(ordered_h),
        "consensus_rate": consensus / len(ordered_h) if ordered_h else 1.0,
        "warnings": warnings,
    }


def refine_pipeline(
    pls: PseudoLabelState,
    emb: EmbeddingTable,
    g: float,
    k: int,
    metric: str = "euclidean",
    num_classes: int | None = None,
) -> tuple[PseudoLabelState, dict]:
    """Split -> reciprocal expansion -> k-NN voting, entirely offline.

    Returns a new state (the input is untouched) plus a report with split
    sizes, move counts, and the vote consensus rate.
    """
    if set(emb.ids) != set(pls.ids()):
        raise ValueError("embedding table must cover exactly the pseudo-labeled samples")
    out = pls.copy()
    table = _normalized_table(emb, metric)
    splits, split_report = split_easy_hard(out, g, num_classes)
    if splits.H:
        moved, remaining = reciprocal_expand(splits, out, table)
        vote_report = knn_vote(remaining, splits, out, table, k)
    else:
        moved = []
        by_id = out.by_id()
        for sid in splits.E:
            by_id[sid].split = "E_refined"
        splits.E_refined = set(splits.E)
        vote_report = {"voted": 0, "consensus_rate": 1.0, "warnings": []}
    report = {
        "split": split_report,
        "moved_by_reciprocal": len(moved),
        "easy_initial": len(splits.E),
        "easy_refined": len(splits.E_refined),
        "hard_refined": len(splits.H_refined),
        "vote": vote_report,
    }
    return out, report


def save_refine_report(report: dict, path, config_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": "refine-report v1", "config_hash": config_hash, **report}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
