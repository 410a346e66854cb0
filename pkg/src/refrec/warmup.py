"""Stage 1: reconstruction pre-training and the initial pseudo-labels.

An autoencoder (shared per-point encoder + fully connected decoder) is
trained on the union of both domains without labels; its encoder then
initializes a source-supervised classifier whose predictions on the target
set become the initial pseudo-labels, each carrying the max-softmax
confidence.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .config import ExperimentConfig
from .geometry import occlusion_augment, stream
from .metricspace import chamfer_loss, emd_loss

PSEUDO_LABEL_FORMAT = "PLBL v1"

SPLIT_TAGS = ("unassigned", "E", "H", "E_refined", "H_refined")
PROVENANCE_TAGS = ("classifier", "reciprocal", "knn_vote")


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass
class PseudoLabelRecord:
    sample_id: str
    label: int
    confidence: float
    split: str = "unassigned"
    provenance: str = "classifier"


@dataclass
class PseudoLabelState:
    """One record per target sample, evolving across pipeline stages."""

    records: list

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in pseudo-label state")

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict:
        return {r.sample_id: r for r in self.records}

    def ids(self) -> list:
        return [r.sample_id for r in self.records]

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.intp)

    def ids_with_split(self, split: str) -> list:
        return [r.sample_id for r in self.records if r.split == split]

    def copy(self) -> "PseudoLabelState":
        return PseudoLabelState([PseudoLabelRecord(**asdict(r)) for r in self.records])


def save_pseudolabels(state: PseudoLabelState, path, config_hash: str, stage: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": PSEUDO_LABEL_FORMAT, "config_hash": config_hash, "stage": stage}
    lines = [json.dumps(header, sort_keys=True)]
    for r in state.records:
        lines.append(
            json.dumps(
                {
                    "id": r.sample_id,
                    "label": r.label,
                    "confidence": r.confidence,
                    "split": r.split,
                    "provenance": r.provenance,
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_pseudolabels(path) -> tuple[PseudoLabelState, dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != PSEUDO_LABEL_FORMAT:
        raise ValueError(f"{path} is not a {PSEUDO_LABEL_FORMAT} file")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            PseudoLabelRecord(
                sample_id=obj["id"],
                label=int(obj["label"]),
                confidence=float(obj["confidence"]),
                split=obj["split"],
                provenance=obj["provenance"],
            )
        )
    return PseudoLabelState(records), header


# ---------------------------------------------------------------------------
# training helpers

def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _augment_batch(clouds, mask, cfg: ExperimentConfig, seed, tag, epoch, indices):
    """Occlude the masked (source-domain) members of a batch in place."""
    lo, hi = cfg.aug_occlusion_range
    out = clouds.copy()
    for j in np.flatnonzero(mask):
        rng = stream(seed, tag, epoch, int(indices[j]))
        frac = rng.uniform(lo, hi)
        out[j] = occlusion_augment(out[j], frac, rng)
    return out


def predict_probs(enc, head, clouds, batch_size=64) -> np.ndarray:
    """Softmax scores for a stack of clouds, graph-free."""
    chunks = []
    with ad.no_grad():
        for i in range(0, len(clouds), batch_size):
            z = mdl.encode(enc, clouds[i : i + batch_size])
            chunks.append(mdl.classify(head, z).data)
    return np.concatenate(chunks, axis=0)


def evaluate_accuracy(enc, head, clouds, labels) -> float:
    preds, _ = mdl.lambda_argmax(predict_probs(enc, head, clouds))
    return float((preds == np.asarray(labels)).mean())


def stratified_val_split(labels, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stratified split; every class keeps at least one train sample."""
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = min(max(1, math.ceil(fraction * len(idx))), len(idx) - 1)
        if len(idx) == 1:
            n_val = 0
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    if not val_idx:
        raise ValueError("empty validation split")
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))


# ---------------------------------------------------------------------------
# stage operations

def pretrain_reconstruction(
    source_clouds: np.ndarray,
    target_clouds: np.ndarray,
    cfg: ExperimentConfig,
    seed: int,
):
    """Train the autoencoder on both domains; labels are never read."""
    if len(source_clouds) == 0 or len(target_clouds) == 0:
        raise ValueError("both domains must be non-empty")
    enc = mdl.init_encoder(cfg.descriptor_dim, cfg.encoder_hidden, seed, "recon-enc")
    dec = mdl.init_decoder(
        cfg.descriptor_dim, cfg.decoder_hidden, cfg.recon_points, seed, "recon-dec"
    )
    clouds = np.concatenate([source_clouds, target_clouds], axis=0)
    is_source = np.zeros(len(clouds), dtype=bool)
    is_source[: len(source_clouds)] = True

    params = enc.params() + dec.params()
    opt = ad.AdamWState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n_batches = math.ceil(len(clouds) / cfg.batch_size)
    total_iters = cfg.recon_epochs * n_batches
    augment = cfg.synthetic_to_real and cfg.augment_recon

    history = []
    it = 0
    for epoch in range(cfg.recon_epochs):
        order_rng = stream(seed, "recon-order", epoch)
        epoch_losses = []
        for batch in _epoch_batches(len(clouds), cfg.batch_size, order_rng):
            inputs = clouds[batch]
            if augment:
                inputs = _augment_batch(
                    inputs, is_source[batch], cfg, seed, "recon-aug", epoch, batch
                )
            # reconstruction target is the (augmented) input itself
            z = mdl.encode(enc, inputs)
            out = mdl.decode(dec, z)
            loss = ad.add(
                ad.scale(chamfer_loss(out, inputs), cfg.cd_weight),
                ad.scale(emd_loss(out, inputs, cap=cfg.exact_solver_cap), cfg.emd_weight),
            )
            loss_val = float(loss.data[0, 0])
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"reconstruction loss became non-finite at epoch {epoch}"
                )
            ad.backward(loss)
            opt.lr = ad.cosine_lr(it, total_iters, cfg.learning_rate)
            ad.adamw_step(params, opt)
            ad.zero_grads(params)
            it += 1
            epoch_losses.append(loss_val)
        history.append(float(np.mean(epoch_losses)))
    return enc, dec, history


def train_source_classifier(
    source_clouds: np.ndarray,
    source_labels: np.ndarray,
    cfg: ExperimentConfig,
    seed: int,
    encoder_init=None,
    tag: str = "cls",
):
    """Cross-entropy training on labeled source data with best-on-validation
    checkpointing. ``encoder_init`` seeds the backbone weights when given."""
    labels = np.asarray(source_labels, dtype=np.intp)
    train_idx, val_idx = stratified_val_split(
        labels, cfg.val_fraction, stream(seed, "val-split")
    )
    enc = mdl.init_encoder(cfg.descriptor_dim, cfg.encoder_hidden, seed, f"{tag}-enc")
    if encoder_init is not None and not cfg.no_transfer:
        mdl.transfer_encoder(encoder_init, enc)
    head = mdl.init_head(cfg.descriptor_dim, cfg.head_hidden, cfg.num_classes, seed, f"{tag}-head")

    params = enc.params() + head.params()
    opt = ad.AdamWState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n_batches = math.ceil(len(train_idx) / cfg.batch_size)
    total_iters = max(1, cfg.cls_epochs * n_batches)
    augment = cfg.synthetic_to_real and cfg.augment_classifier

    best = {"val_accuracy": -1.0, "enc": None, "head": None, "epoch": -1}
    val_history = []
    it = 0
    for epoch in range(cfg.cls_epochs):
        order_rng = stream(seed, f"{tag}-order", epoch)
        for batch_pos in _epoch_batches(len(train_idx), cfg.batch_size, order_rng):
            batch = train_idx[batch_pos]
            inputs = source_clouds[batch]
            if augment:
                inputs = _augment_batch(
                    inputs, np.ones(len(batch), dtype=bool), cfg, seed, f"{tag}-aug", epoch, batch
                )
            logits = mdl.head_logits(head, mdl.encode(enc, inputs))
            loss = ad.cross_entropy(logits, labels[batch])
            if not np.isfinite(loss.data[0, 0]):
                raise DivergenceError(f"classifier loss became non-finite at epoch {epoch}")
            ad.backward(loss)
            opt.lr = ad.cosine_lr(it, total_iters, cfg.learning_rate)
            ad.adamw_step(params, opt)
            ad.zero_grads(params)
            it += 1
        val_acc = evaluate_accuracy(enc, head, source_clouds[val_idx], labels[val_idx])
        val_history.append(val_acc)
        if val_acc > best["val_accuracy"]:
            best.update(val_accuracy=val_acc, enc=enc.copy(), head=head.copy(), epoch=epoch)
    return {
        "enc": best["enc"],
        "head": best["head"],
        "best_epoch": best["epoch"],
        "val_accuracy": best["val_accuracy"],
        "val_history": val_history,
        "train_idx": train_idx,
        "val_idx": val_idx,
    }


def emit_initial_pseudolabels(enc, head, target_clouds, target_ids) -> PseudoLabelState:
    """Label every target sample with the warm-up classifier's argmax."""
    probs = predict_probs(enc, head, target_clouds)
    labels, confidences = mdl.lambda_argmax(probs)
    records = [
        PseudoLabelRecord(sample_id=sid, label=int(l), confidence=float(c))
        for sid, l, c in zip(target_ids, labels, confidences)
    ]
    return PseudoLabelState(records)
