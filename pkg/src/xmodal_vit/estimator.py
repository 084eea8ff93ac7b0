"""scikit-learn style wrapper around the shared cross-modal ViT."""

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from .optim import SGD, cosine_lr
from .training import (
    EpochReport,
    LOSS_KEYS,
    augment_batch,
    class_tokens,
    evaluate,
    iterate_batches,
    predict_logits,
    train_step,
)
from .validation import check_images, check_labels, check_paired
from .vit import ModelConfig, init_params, set_input_stats, strip_sam, trainable

logger = logging.getLogger(__name__)


class CrossModalViTClassifier(ClassifierMixin, BaseEstimator):
    """Single shared ViT trained on WL/NBI pairs, predicting from WL alone.

    ``fit`` takes WL images ``X`` and, unless ``mode='wl_only'``, the
    pixel-aligned NBI images ``X_nbi``. After fitting, ``predict`` and
    ``transform`` only ever see WL images and never read the alignment
    projections.

    Parameters
    ----------
    mode : {'wl_only', 'cga', 'cga_sam'}
        Which loss terms are live.
    lam : float
        Weight of the response-map alignment term.
    lr, momentum, weight_decay, batch_size, max_epochs
        SGD with cosine-annealed learning rate, stepped per epoch.
    """

    def __init__(self, image_size: int = 64, patch_size: int = 8, embed_dim: int = 96, num_heads: int = 6,
                 depth: int = 4, mlp_ratio: int = 4, align_layers: Sequence[int] = (-1,), sam_dim: Optional[int] = None,
                 paper_faithful: bool = True, mode: str = "cga_sam", lam: float = 0.3, lr: float = 1e-3,
                 momentum: float = 0.9, weight_decay: float = 5e-5, batch_size: int = 16, max_epochs: int = 500,
                 augment: bool = True, dtype: str = "float32", random_state: int = 0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.depth = depth
        self.mlp_ratio = mlp_ratio
        self.align_layers = align_layers
        self.sam_dim = sam_dim
        self.paper_faithful = paper_faithful
        self.mode = mode
        self.lam = lam
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.augment = augment
        self.dtype = dtype
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, patch_size=self.patch_size, embed_dim=self.embed_dim,
                           num_heads=self.num_heads, depth=self.depth, mlp_ratio=self.mlp_ratio,
                           sam_dim=self.sam_dim, align_layers=tuple(self.align_layers),
                           paper_faithful=self.paper_faithful)

    def fit(self, X, y, X_nbi=None, eval_set=None, callback: Optional[Callable[[EpochReport], None]] = None):
        """Train from a fresh initialisation.

        ``eval_set=(X_val, y_val)`` enables per-epoch WL validation; the
        parameters from the best validation epoch (earliest on ties) are kept.
        """
        if self.mode not in ("wl_only", "cga", "cga_sam"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 1 <= self.max_epochs <= 500:
            raise ValueError(f"max_epochs must be in [1, 500], got {self.max_epochs}")
        cfg = self.model_config()
        X = check_images(X, cfg.image_size, dtype=self.dtype)
        y = check_labels(y, X.shape[0])
        if self.mode != "wl_only":
            if X_nbi is None:
                raise ValueError(f"mode {self.mode!r} needs paired NBI images (X_nbi)")
            X_nbi = check_paired(X, X_nbi, dtype=self.dtype)
        else:
            X_nbi = None
        if eval_set is not None:
            X_val = check_images(eval_set[0], cfg.image_size, dtype=self.dtype)
            y_val = check_labels(eval_set[1], X_val.shape[0])

        rng = np.random.default_rng(self.random_state)
        params = init_params(cfg, rng, dtype=np.dtype(self.dtype), with_sam=self.mode == "cga_sam")
        # standardise with WL statistics in every mode: WL is the inference modality
        set_input_stats(params, X.mean(axis=(0, 1, 2)), np.maximum(X.std(axis=(0, 1, 2)), 1e-3))
        opt = SGD(trainable(params), self.lr, self.momentum, self.weight_decay)
        data_rng = np.random.default_rng([self.random_state, 1])
        n = X.shape[0]
        bs = min(self.batch_size, n)
        self.history_: List[EpochReport] = []
        best_acc, best = -1.0, None
        step = 0
        for epoch in range(self.max_epochs):
            lr = cosine_lr(epoch, self.max_epochs, self.lr)
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            n_batches = 0
            for idx in iterate_batches(n, bs, data_rng, drop_last=True):
                wl = X[idx]
                nbi = X_nbi[idx] if X_nbi is not None else None
                if self.augment:
                    wl, nbi = augment_batch(wl, nbi, data_rng)
                values = train_step(params, cfg, opt, wl, nbi, y[idx], self.mode, self.lam, lr, step)
                for k in LOSS_KEYS:
                    sums[k] += values[k]
                n_batches += 1
                step += 1
            acc = evaluate(params, cfg, X_val, y_val) if eval_set is not None else float("nan")
            report = EpochReport(epoch, {k: v / max(n_batches, 1) for k, v in sums.items()}, acc, lr)
            self.history_.append(report)
            if callback is not None:
                callback(report)
            logger.debug("epoch %d %s", epoch, report.csv_row())
            if eval_set is not None and acc > best_acc:
                best_acc, best = acc, {k: p.data.copy() for k, p in params.items()}
        if best is not None:
            for k, arr in best.items():
                params[k].data[...] = arr
            self.best_score_ = best_acc
            self.best_epoch_ = next(r.epoch for r in self.history_ if r.val_accuracy == best_acc)
        for p in params.values():
            p.grad = None
        self.config_ = cfg
        self.params_ = params
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _inference_params(self):
        check_is_fitted(self, "params_")
        return strip_sam(self.params_)

    def decision_function(self, X) -> np.ndarray:
        X = check_images(X, self.config_.image_size, dtype=self.dtype)
        return predict_logits(self._inference_params(), self.config_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Post-LN WL class tokens, ``[n, d]``."""
        X = check_images(X, self.config_.image_size, dtype=self.dtype)
        return class_tokens(self._inference_params(), self.config_, X)

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        X = check_images(X, self.config_.image_size, dtype=self.dtype)
        return evaluate(self._inference_params(), self.config_, X, check_labels(y, X.shape[0]))

    # -- persistence ---------------------------------------------------
    def save(self, path, prune: bool = False) -> None:
        check_is_fitted(self, "params_")
        checkpoint.save(path, self.config_, self.params_, prune=prune)

    @classmethod
    def load(cls, path) -> "CrossModalViTClassifier":
        cfg, params = checkpoint.load(path)
        dtype = params["head.weight"].dtype
        est = cls(image_size=cfg.image_size, patch_size=cfg.patch_size, embed_dim=cfg.embed_dim,
                  num_heads=cfg.num_heads, depth=cfg.depth, mlp_ratio=cfg.mlp_ratio,
                  align_layers=cfg.align_layers, sam_dim=cfg.sam_dim, paper_faithful=cfg.paper_faithful,
                  dtype=str(dtype))
        est.config_ = cfg
        est.params_ = params
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = cfg.image_size * cfg.image_size * 3
        return est

    @property
    def has_alignment_params(self) -> bool:
        check_is_fitted(self, "params_")
        return any(k.startswith("sam.") for k in self.params_)
