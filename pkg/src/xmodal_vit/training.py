"""Dual-modality training: one step, one epoch, WL-only evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .alignment import DEFAULT_LAMBDA, MODES, LossBreakdown, total_loss
from .data import apply_augment, sample_augment_params
from .optim import SGD
from .vit import BackboneOutput, ModelConfig, Params, classify, forward

LOSS_KEYS = ("cls_wl", "cls_nbi", "global_align", "local_align", "total")


class NumericalError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    """Optimisation settings; defaults follow the published recipe."""

    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 16
    max_epochs: int = 500
    lam: float = DEFAULT_LAMBDA
    mode: str = "cga_sam"
    seed: int = 0
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.max_epochs <= 500:
            raise ValueError(f"max_epochs must be in [1, 500], got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class EpochReport:
    epoch: int
    losses: Dict[str, float]
    val_accuracy: float
    lr: float

    def csv_row(self) -> List[str]:
        return [str(self.epoch)] + [f"{self.losses[k]:.6f}" for k in LOSS_KEYS] + \
               [f"{self.val_accuracy:.6f}" if self.val_accuracy == self.val_accuracy else "", f"{self.lr:.6g}"]

    @staticmethod
    def csv_header() -> List[str]:
        return ["epoch", *LOSS_KEYS, "val_accuracy", "lr"]


def _split(out: BackboneOutput, b: int) -> tuple:
    """Split a concatenated [WL; NBI] pass into two per-modality outputs."""
    halves = []
    for sl, tag in ((slice(0, b), "w"), (slice(b, 2 * b), "n")):
        levels = {k: (c[sl], f[sl]) for k, (c, f) in out.levels.items()}
        halves.append(BackboneOutput(out.cls[sl], out.patches[sl], tag, [], levels))
    return tuple(halves)


def compute_loss(params: Params, cfg: ModelConfig, wl: np.ndarray, nbi: Optional[np.ndarray],
                 labels: Sequence[int], mode: str, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """Forward both modalities through the shared backbone and assemble the loss.

    The two modalities go through one concatenated pass; weights are shared,
    so this is the same computation as two separate passes.
    """
    if mode == "wl_only":
        return total_loss(params, cfg, forward(params, cfg, wl, "w"), None, labels, lam, mode)
    b = wl.shape[0]
    out_w, out_n = _split(forward(params, cfg, np.concatenate([wl, nbi])), b)
    return total_loss(params, cfg, out_w, out_n, labels, lam, mode)


def train_step(params: Params, cfg: ModelConfig, opt: SGD, wl: np.ndarray, nbi: Optional[np.ndarray],
               labels: Sequence[int], mode: str, lam: float, lr: float, step: int = 0) -> Dict[str, float]:
    """zero_grad -> loss -> backward -> SGD step. Returns the float breakdown."""
    opt.zero_grad()
    loss = compute_loss(params, cfg, wl, nbi, labels, mode, lam)
    values = loss.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericalError(step, str(values))
    loss.total.backward()
    opt.step(lr)
    return values


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator], drop_last: bool):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    for i in range(0, stop, batch_size):
        yield order[i:i + batch_size]


def augment_batch(wl: np.ndarray, nbi: Optional[np.ndarray], rng: np.random.Generator):
    """Pair-synchronised crop + flip: one draw per pair, applied to both images."""
    wl_out = np.empty_like(wl)
    nbi_out = None if nbi is None else np.empty_like(nbi)
    for i in range(wl.shape[0]):
        p = sample_augment_params(rng, wl.shape[1], wl.shape[2])
        wl_out[i] = apply_augment(wl[i], p)
        if nbi is not None:
            if p.window(wl[i].shape) != p.window(nbi[i].shape):
                raise AssertionError(f"augmentation window differs between modalities of pair {i}")
            nbi_out[i] = apply_augment(nbi[i], p)
    return wl_out, nbi_out


def predict_logits(params: Params, cfg: ModelConfig, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """WL-only inference; touches no alignment parameters."""
    dtype = params["head.weight"].dtype
    out = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch_size):
            chunk = images[i:i + batch_size].astype(dtype, copy=False)
            out.append(classify(params, forward(params, cfg, chunk, "w").cls).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes))


def class_tokens(params: Params, cfg: ModelConfig, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    dtype = params["head.weight"].dtype
    out = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(forward(params, cfg, images[i:i + batch_size].astype(dtype, copy=False), "w").cls.data)
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim))


def evaluate(params: Params, cfg: ModelConfig, images: np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of WL images whose argmax logit matches the label."""
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty validation set")
    pred = predict_logits(params, cfg, images).argmax(axis=1)
    return float((pred == labels).mean())
