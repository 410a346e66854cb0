"""Stage 3: dual-head self-training with a mean teacher.

A shared backbone feeds two heads: the source head trains on labeled source
data mixed with the refined easy split, the target head on target data only.
The target loss blends cross-entropy against the refined labels with
cross-entropy against online labels from the teacher (argmax of the two
teacher heads' summed softmax scores), ramped linearly from the former to
the latter, and each target sample is weighted by how close the teacher
places it to its class prototype. The teacher is updated only by exponential
moving average, never by gradients.

Batch composition is drawn from streams keyed (seed, "st-batch", iteration),
source half first, so a run's batch schedule can be reproduced externally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import model as mdl
from .config import ExperimentConfig
from .geometry import stream
from .metricspace import EmbeddingTable
from .warmup import (
    DivergenceError,
    PseudoLabelState,
    evaluate_accuracy,
    stratified_val_split,
)


@dataclass
class StudentBundle:
    """Backbone plus the two domain heads (one shared object when the
    single-head ablation is active)."""

    enc: mdl.MLPParams
    head_s: mdl.MLPParams
    head_t: mdl.MLPParams

    @property
    def shared_head(self) -> bool:
        return self.head_s is self.head_t

    def params(self) -> list:
        out = self.enc.params() + self.head_s.params()
        if not self.shared_head:
            out += self.head_t.params()
        return out

    def copy(self) -> "StudentBundle":
        enc = self.enc.copy()
        head_s = self.head_s.copy()
        head_t = head_s if self.shared_head else self.head_t.copy()
        return StudentBundle(enc=enc, head_s=head_s, head_t=head_t)


@dataclass
class PrototypeTable:
    """One mean descriptor per class over the refined easy split; rows with
    zero support are undefined and excluded from the plausibility softmax."""

    means: np.ndarray  # (k, d)
    counts: np.ndarray  # (k,)

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0


def compute_prototypes(features: np.ndarray, labels: np.ndarray, num_classes: int) -> PrototypeTable:
    """Class-wise mean of descriptors; rows without members stay flagged."""
    if len(features) == 0:
        raise ValueError("cannot compute prototypes from an empty set")
    labels = np.asarray(labels, dtype=np.intp)
    d = features.shape[1]
    means = np.zeros((num_classes, d))
    counts = np.zeros(num_classes, dtype=np.intp)
    for c in range(num_classes):
        mask = labels == c
        counts[c] = mask.sum()
        if counts[c]:
            means[c] = features[mask].mean(axis=0)
    return PrototypeTable(means=means, counts=counts)


def plausibility_weight(features: np.ndarray, assigned: np.ndarray, protos: PrototypeTable):
    """Softmax over classes of the negative distance to each prototype,
    evaluated at each sample's assigned class.

    Samples assigned to an undefined class fall back to 1/#defined; the
    number of fallbacks is returned for logging.
    """
    defined_idx = np.flatnonzero(protos.defined)
    if len(defined_idx) == 0:
        raise ValueError("plausibility weights need at least one defined prototype")
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    assigned = np.asarray(assigned, dtype=np.intp)
    dist = cdist(feats, protos.means[defined_idx])
    neg = -dist
    neg -= neg.max(axis=1, keepdims=True)
    e = np.exp(neg)
    soft = e / e.sum(axis=1, keepdims=True)
    col_of_class = {int(c): j for j, c in enumerate(defined_idx)}
    z = np.empty(len(feats))
    fallbacks = 0
    for i, c in enumerate(assigned):
        j = col_of_class.get(int(c))
        if j is None:
            z[i] = 1.0 / len(defined_idx)
            fallbacks += 1
        else:
            z[i] = soft[i, j]
    return z, fallbacks


def online_pseudolabel(bundle: StudentBundle, clouds: np.ndarray) -> np.ndarray:
    """Argmax of the elementwise sum of both heads' softmax outputs (the sum
    is not renormalized; argmax is scale invariant). Ties go to the lowest
    class index."""
    with ad.no_grad():
        z = mdl.encode(bundle.enc, clouds)
        p = mdl.classify(bundle.head_s, z).data + mdl.classify(bundle.head_t, z).data
    return p.argmax(axis=1)


def alpha(it: int, total: int) -> float:
    """Linear ramp 0 -> 1 over the whole run, clamped."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    return min(1.0, max(0.0, it / total))


def ema_update(teacher: StudentBundle, student: StudentBundle, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, tensor by tensor."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA decay must be in [0, 1]")
    for t_p, s_p in zip(teacher.params(), student.params()):
        t_p.data *= m
        t_p.data += (1.0 - m) * s_p.data


def predict_target(bundle: StudentBundle, clouds: np.ndarray, batch_size: int = 64):
    """Inference path: backbone -> target head -> argmax."""
    chunks = []
    with ad.no_grad():
        for i in range(0, len(clouds), batch_size):
            z = mdl.encode(bundle.enc, clouds[i : i + batch_size])
            chunks.append(mdl.classify(bundle.head_t, z).data)
    probs = np.concatenate(chunks, axis=0)
    labels, confs = mdl.lambda_argmax(probs)
    return labels, confs, probs


def _teacher_embeddings(enc, clouds, batch_size: int = 64) -> np.ndarray:
    chunks = []
    with ad.no_grad():
        for i in range(0, len(clouds), batch_size):
            chunks.append(mdl.encode(enc, clouds[i : i + batch_size]).data)
    return np.concatenate(chunks, axis=0)


def selftrain_loop(
    source_clouds: np.ndarray,
    source_labels: np.ndarray,
    target_clouds: np.ndarray,
    target_ids: list,
    pls: PseudoLabelState,
    recon_encoder: mdl.MLPParams,
    recon_embeddings: EmbeddingTable,
    cfg: ExperimentConfig,
    seed: int,
    target_eval=None,
    iteration_log: list | None = None,
) -> dict:
    """Run the self-training stage and return the best-on-source-val model.

    ``recon_encoder`` initializes the backbone; ``recon_embeddings`` must be
    its frozen descriptor table over the target set (prototype space).
    ``target_eval`` is an optional (clouds, labels) pair used for
    evaluation-only metrics.
    """
    k = cfg.num_classes
    labels_arr = np.asarray(source_labels, dtype=np.intp)
    by_id = pls.by_id()
    easy_ids = pls.ids_with_split("E_refined")
    hard_ids = pls.ids_with_split("H_refined")
    if not easy_ids:
        raise DivergenceError("refined easy split is empty; run refinement first")
    pool_ids = easy_ids + hard_ids
    if not pool_ids:
        raise DivergenceError("no refined target samples to train on")
    idx_of = {sid: i for i, sid in enumerate(target_ids)}
    easy_idx = np.array([idx_of[s] for s in easy_ids], dtype=np.intp)
    pool_idx = np.array([idx_of[s] for s in pool_ids], dtype=np.intp)
    easy_labels = np.array([by_id[s].label for s in easy_ids], dtype=np.intp)
    pool_labels = np.array([by_id[s].label for s in pool_ids], dtype=np.intp)

    train_idx, val_idx = stratified_val_split(
        labels_arr, cfg.val_fraction, stream(seed, "val-split")
    )

    enc = mdl.init_encoder(cfg.descriptor_dim, cfg.encoder_hidden, seed, "st-enc")
    if not cfg.no_transfer:
        mdl.transfer_encoder(recon_encoder, enc)
    head_s = mdl.init_head(cfg.descriptor_dim, cfg.head_hidden, k, seed, "st-head-s")
    head_t = head_s if cfg.single_head else mdl.init_head(
        cfg.descriptor_dim, cfg.head_hidden, k, seed, "st-head-t"
    )
    student = StudentBundle(enc=enc, head_s=head_s, head_t=head_t)
    teacher = student if cfg.no_ema else student.copy()

    # prototypes over the refined easy split, frozen in descriptor space
    emb_by_id = {sid: recon_embeddings.vectors[i] for i, sid in enumerate(recon_embeddings.ids)}
    proto_feats = np.stack([emb_by_id[s] for s in easy_ids])
    protos = compute_prototypes(proto_feats, easy_labels, k)

    params = student.params()
    opt = ad.AdamWState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    iters_per_epoch = max(1, math.ceil(len(pool_ids) / cfg.batch_size))
    total_iters = cfg.selftrain_epochs * iters_per_epoch
    half = cfg.batch_size // 2
    use_online = not cfg.no_online_refine
    use_teacher_term = not cfg.no_ema

    best = {"val_accuracy": -1.0, "bundle": None, "epoch": -1}
    epochs = []
    it = 0
    for epoch in range(cfg.selftrain_epochs):
        if cfg.prototypes_in_classifier_space:
            feats = _teacher_embeddings(teacher.enc, target_clouds[easy_idx])
            protos = compute_prototypes(feats, easy_labels, k)
        sums = {"loss_source": 0.0, "loss_target": 0.0, "z": 0.0, "agree": 0.0}
        z_count = 0
        agree_count = 0
        for _ in range(iters_per_epoch):
            rng = stream(seed, "st-batch", it)
            if cfg.no_dual_head:
                src_sel = rng.choice(len(train_idx), size=cfg.batch_size,
                                     replace=len(train_idx) < cfg.batch_size)
                easy_sel = np.empty(0, dtype=np.intp)
            else:
                src_sel = rng.choice(len(train_idx), size=half,
                                     replace=len(train_idx) < half)
                easy_sel = rng.choice(len(easy_ids), size=cfg.batch_size - half,
                                      replace=len(easy_ids) < cfg.batch_size - half)
            tgt_sel = rng.choice(len(pool_ids), size=cfg.batch_size,
                                 replace=len(pool_ids) < cfg.batch_size)

            src_batch = source_clouds[train_idx[src_sel]]
            src_y = labels_arr[train_idx[src_sel]]
            easy_batch = target_clouds[easy_idx[easy_sel]] if len(easy_sel) else None
            easy_y = easy_labels[easy_sel]
            tgt_batch = target_clouds[pool_idx[tgt_sel]]
            tgt_refined_y = pool_labels[tgt_sel]

            parts = [src_batch] + ([easy_batch] if easy_batch is not None else []) + [tgt_batch]
            combined = np.concatenate(parts, axis=0)
            n_a = len(src_batch) + (len(easy_batch) if easy_batch is not None else 0)

            # teacher quantities, outside the gradient graph
            a_t = alpha(it, total_iters) if use_teacher_term else 0.0
            if use_online or a_t > 0.0:
                online_y = online_pseudolabel(teacher, tgt_batch)
                sums["agree"] += float((online_y == tgt_refined_y).sum())
                agree_count += len(online_y)
            else:
                online_y = None
            if use_online:
                t_feats = _teacher_embeddings(teacher.enc, tgt_batch)
                z_w, _ = plausibility_weight(t_feats, online_y, protos)
            else:
                z_w = np.ones(len(tgt_batch))
            sums["z"] += float(z_w.sum())
            z_count += len(z_w)

            z_all = mdl.encode(student.enc, combined)
            z_a = ad.rows(z_all, 0, n_a)
            z_b = ad.rows(z_all, n_a, n_a + len(tgt_batch))

            logits_a = mdl.head_logits(student.head_s, z_a)
            ce_src = ad.cross_entropy(ad.rows(logits_a, 0, len(src_batch)), src_y)
            if easy_batch is not None:
                ce_easy = ad.cross_entropy(ad.rows(logits_a, len(src_batch), n_a), easy_y)
                loss_s = ad.add(ce_src, ce_easy)
            else:
                loss_s = ce_src

            logits_b = mdl.head_logits(student.head_t, z_b)
            if a_t > 0.0:
                loss_t = ad.add(
                    ad.cross_entropy(logits_b, tgt_refined_y, (1.0 - a_t) * z_w),
                    ad.cross_entropy(logits_b, online_y, a_t * z_w),
                )
            else:
                loss_t = ad.cross_entropy(logits_b, tgt_refined_y, z_w)

            loss = ad.add(loss_s, loss_t)
            ls, lt = float(loss_s.data[0, 0]), float(loss_t.data[0, 0])
            if not np.isfinite(ls + lt):
                raise DivergenceError(f"self-training loss became non-finite at iteration {it}")
            ad.backward(loss)
            opt.lr = ad.cosine_lr(it, total_iters, cfg.learning_rate)
            ad.adamw_step(params, opt)
            ad.zero_grads(params)
            if not cfg.no_ema:
                ema_update(teacher, student, cfg.ema_decay)
            if iteration_log is not None:
                iteration_log.append({"it": it, "loss_source": ls, "loss_target": lt})
            sums["loss_source"] += ls
            sums["loss_target"] += lt
            it += 1

        val_acc = evaluate_accuracy(
            student.enc, student.head_s, source_clouds[val_idx], labels_arr[val_idx]
        )
        record = {
            "epoch": epoch,
            "loss_source": sums["loss_source"] / iters_per_epoch,
            "loss_target": sums["loss_target"] / iters_per_epoch,
            "alpha": alpha(it, total_iters) if use_teacher_term else 0.0,
            "mean_z": sums["z"] / z_count if z_count else 1.0,
            "online_agreement": sums["agree"] / agree_count if agree_count else None,
            "source_val_accuracy": val_acc,
        }
        if target_eval is not None and cfg.eval_target_each_epoch:
            eval_clouds, eval_labels = target_eval
            preds, _, _ = predict_target(student, eval_clouds)
            record["target_accuracy"] = float((preds == np.asarray(eval_labels)).mean())
        epochs.append(record)
        if val_acc > best["val_accuracy"]:
            best.update(val_accuracy=val_acc, bundle=student.copy(), epoch=epoch)

    return {
        "bundle": best["bundle"],
        "final_bundle": student,
        "teacher": teacher,
        "best_epoch": best["epoch"],
        "val_accuracy": best["val_accuracy"],
        "epochs": epochs,
        "prototypes": protos,
        "total_iters": total_iters,
    }
