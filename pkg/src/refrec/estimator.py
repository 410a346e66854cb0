"""Scikit-learn-style front end for the whole adaptation pipeline.

``fit(X, y)`` alone trains a plain source-supervised classifier (the
no-adaptation baseline); passing unlabeled target clouds via ``X_target``
runs the full pipeline: reconstruction pre-training on both domains,
source-supervised warm-up, offline pseudo-label refinement, and dual-head
self-training. ``predict`` uses the target classification path.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import model as mdl
from .config import ExperimentConfig
from .refine import refine_pipeline
from .selftrain import StudentBundle, predict_target, selftrain_loop
from .validation import check_cloud_array, check_labels
from .warmup import (
    emit_initial_pseudolabels,
    pretrain_reconstruction,
    train_source_classifier,
)


class PointCloudDomainAdapter(BaseEstimator, ClassifierMixin):
    """Point-cloud classifier that adapts to an unlabeled target domain.

    Parameters mirror the pipeline configuration; ``random_state`` seeds
    every stream, so fits are fully reproducible.
    """

    def __init__(
        self,
        n_points=256,
        descriptor_dim=128,
        encoder_hidden=(64, 64),
        decoder_hidden=(256, 512),
        head_hidden=64,
        batch_size=16,
        learning_rate=1e-3,
        weight_decay=1e-4,
        recon_epochs=60,
        cls_epochs=15,
        selftrain_epochs=15,
        easy_fraction=0.1,
        vote_k=3,
        ema_decay=0.99,
        cd_weight=1.0,
        emd_weight=1.0,
        synthetic_to_real=True,
        random_state=0,
    ):
        self.n_points = n_points
        self.descriptor_dim = descriptor_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.head_hidden = head_hidden
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.recon_epochs = recon_epochs
        self.cls_epochs = cls_epochs
        self.selftrain_epochs = selftrain_epochs
        self.easy_fraction = easy_fraction
        self.vote_k = vote_k
        self.ema_decay = ema_decay
        self.cd_weight = cd_weight
        self.emd_weight = emd_weight
        self.synthetic_to_real = synthetic_to_real
        self.random_state = random_state

    def _config(self, n_classes: int) -> ExperimentConfig:
        return ExperimentConfig(
            classes=[f"class_{i}" for i in range(n_classes)],
            n_points=self.n_points,
            descriptor_dim=self.descriptor_dim,
            encoder_hidden=list(self.encoder_hidden),
            decoder_hidden=list(self.decoder_hidden),
            head_hidden=self.head_hidden,
            recon_points=self.n_points,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            recon_epochs=self.recon_epochs,
            cls_epochs=self.cls_epochs,
            selftrain_epochs=self.selftrain_epochs,
            cd_weight=self.cd_weight,
            emd_weight=self.emd_weight,
            easy_fraction=self.easy_fraction,
            vote_k=self.vote_k,
            ema_decay=self.ema_decay,
            synthetic_to_real=self.synthetic_to_real,
            eval_target_each_epoch=False,
        )

    def fit(self, X, y, X_target=None):
        """Fit on labeled source clouds, adapting to X_target when given."""
        X = check_cloud_array(X, name="X")
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        y_idx = np.searchsorted(self.classes_, y)
        cfg = self._config(len(self.classes_))
        seed = int(self.random_state)

        if X_target is None:
            cls = train_source_classifier(X, y_idx, cfg, seed, encoder_init=None)
            self.model_ = StudentBundle(enc=cls["enc"], head_s=cls["head"], head_t=cls["head"])
            self.recon_encoder_ = None
            self.pseudo_labels_ = None
            self.refine_report_ = None
            self.source_val_accuracy_ = cls["val_accuracy"]
            return self

        X_target = check_cloud_array(X_target, n_points=X.shape[1], name="X_target")
        enc_rec, _, _ = pretrain_reconstruction(X, X_target, cfg, seed)
        cls = train_source_classifier(X, y_idx, cfg, seed, encoder_init=enc_rec)
        target_ids = [f"target/{i:06d}" for i in range(len(X_target))]
        pls = emit_initial_pseudolabels(cls["enc"], cls["head"], X_target, target_ids)
        emb = mdl.compute_embeddings(enc_rec, X_target, target_ids)
        refined, report = refine_pipeline(
            pls, emb, cfg.easy_fraction, cfg.vote_k, num_classes=cfg.num_classes
        )
        result = selftrain_loop(
            X, y_idx, X_target, target_ids, refined, enc_rec, emb, cfg, seed
        )
        self.model_ = result["bundle"]
        self.recon_encoder_ = enc_rec
        self.pseudo_labels_ = refined
        self.refine_report_ = report
        self.source_val_accuracy_ = result["val_accuracy"]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_cloud_array(X, n_points=self.n_points, name="X")
        _, _, probs = predict_target(self.model_, X)
        return probs

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_cloud_array(X, n_points=self.n_points, name="X")
        labels, _, _ = predict_target(self.model_, X)
        return self.classes_[labels]

    def transform(self, X) -> np.ndarray:
        """Global shape descriptors from the reconstruction encoder (falls
        back to the classifier backbone when fit ran without a target)."""
        self._check_fitted()
        X = check_cloud_array(X, n_points=self.n_points, name="X")
        enc = self.recon_encoder_ if self.recon_encoder_ is not None else self.model_.enc
        table = mdl.compute_embeddings(enc, X, list(range(len(X))))
        return table.vectors
