"""Evaluation metrics: classification accuracy and pseudo-label quality.

Truth labels are only ever passed in from evaluation contexts; training code
paths never import this module's consumers with label access.
"""

from __future__ import annotations

import numpy as np

from .warmup import PseudoLabelState


def accuracy(preds, truths) -> tuple[float, dict]:
    """Overall accuracy plus per-class recall (keyed by true class)."""
    preds = np.asarray(preds, dtype=np.intp)
    truths = np.asarray(truths, dtype=np.intp)
    if len(preds) == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if len(preds) != len(truths):
        raise ValueError("predictions and truths must have equal length")
    overall = float((preds == truths).mean())
    per_class = {}
    for c in np.unique(truths):
        mask = truths == c
        per_class[int(c)] = {
            "recall": float((preds[mask] == c).mean()),
            "support": int(mask.sum()),
        }
    return overall, per_class


def pseudo_label_quality(pls: PseudoLabelState, truths_by_id: dict) -> dict:
    """Pseudo-label accuracy overall and within each split subset."""
    rows = [(r.sample_id, r.label, r.split) for r in pls.records]
    correct = {sid: int(label == truths_by_id[sid]) for sid, label, _ in rows}
    out = {
        "overall": float(np.mean([correct[sid] for sid, _, _ in rows])),
        "count": len(rows),
        "within": {},
    }
    for split in ("E", "H", "E_refined", "H_refined"):
        members = [sid for sid, _, s in rows if s == split]
        if members:
            out["within"][split] = {
                "accuracy": float(np.mean([correct[sid] for sid in members])),
                "count": len(members),
            }
    return out
