"""Training-only cross-modal alignment: class-token cosine alignment and
class-to-patch response-map alignment, plus assembly of the four-term loss.

Nothing here is needed at inference; the response-map projections live under
``sam.*`` parameter names so :func:`xmodal_vit.vit.strip_sam` can drop them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vit import BackboneOutput, ModelConfig, Params, classify

DEFAULT_LAMBDA = 0.3
MODES = ("wl_only", "cga", "cga_sam")

# loss terms are assembled in double so the breakdown adds up exactly
_LOSS_DTYPE = np.float64


def _as_batch(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 1 else x


def cga_loss(c_w: Tensor, c_n: Tensor) -> Tensor:
    """``1 - cos(c_w, c_n)``, averaged over the batch when inputs are ``[B, d]``."""
    c_w, c_n = _as_batch(c_w), _as_batch(c_n)
    cos = T.cosine_similarity(T.astype(c_w, _LOSS_DTYPE), T.astype(c_n, _LOSS_DTYPE))
    return 1.0 - cos.mean()


def spatial_attention(patches: Tensor, cls: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
    """Response map ``softmax((c Wq)(F Wk)^T)`` over the N patches.

    ``patches`` is ``[B, N, d]`` (or ``[N, d]``), ``cls`` is ``[B, d]`` (or
    ``[d]``). No temperature / sqrt scaling is applied to the logits.
    """
    single = patches.ndim == 2
    if single:
        patches, cls = T.reshape(patches, (1,) + patches.shape), _as_batch(cls)
    b = patches.shape[0]
    q = T.reshape(cls @ wq, (b, 1, wq.shape[1]))
    k = patches @ wk
    logits = T.reshape(q @ T.transpose(k), (b, patches.shape[1]))
    r = T.softmax(logits)
    return T.reshape(r, (r.shape[1],)) if single else r


def local_loss(r_w: Tensor, r_n: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """``lam * (1 - cos(R_w, R_n))``, batch-averaged."""
    if r_w.shape != r_n.shape:
        raise T.ShapeError(f"response maps differ in shape: {r_w.shape} vs {r_n.shape}")
    r_w, r_n = _as_batch(r_w), _as_batch(r_n)
    cos = T.cosine_similarity(T.astype(r_w, _LOSS_DTYPE), T.astype(r_n, _LOSS_DTYPE))
    return T.scale(1.0 - cos.mean(), lam)


@dataclass
class ResponseMap:
    values: np.ndarray
    modality: str = "w"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def to_text(self) -> str:
        """One ``index probability`` row per patch."""
        return "".join(f"{i} {p:.9g}\n" for i, p in enumerate(self.values))

    @classmethod
    def from_text(cls, text: str, modality: str = "w") -> "ResponseMap":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        return cls(np.array([float(p) for _, p in rows]), modality)


@dataclass
class LossBreakdown:
    """The four loss terms and their sum, as graph-attached scalars."""

    cls_wl: Tensor
    cls_nbi: Tensor
    global_align: Tensor
    local_align: Tensor
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("cls_wl", "cls_nbi", "global_align", "local_align", "total")}


def _zero() -> Tensor:
    return Tensor(np.zeros((), dtype=_LOSS_DTYPE))


def _ce(params: Params, cls: Tensor, labels) -> Tensor:
    return T.cross_entropy_logits(T.astype(classify(params, cls), _LOSS_DTYPE), labels)


def total_loss(params: Params, cfg: ModelConfig, out_w: BackboneOutput, out_n: Optional[BackboneOutput],
               labels: Sequence[int], lam: float = DEFAULT_LAMBDA, mode: str = "cga_sam") -> LossBreakdown:
    """Assemble the four-term objective; terms outside ``mode`` are constant zeros.

    ``wl_only`` keeps the WL classification term; ``cga`` adds NBI
    classification and class-token alignment; ``cga_sam`` adds response-map
    alignment. Alignment terms are summed over ``cfg.align_layers``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cls_wl = _ce(params, out_w.cls, labels)
    cls_nbi, glob, loc = _zero(), _zero(), _zero()
    if mode != "wl_only":
        if out_n is None:
            raise ValueError(f"mode {mode!r} needs the NBI pass")
        cls_nbi = _ce(params, out_n.cls, labels)
        for j, layer in enumerate(cfg.align_layers):
            cw, fw = out_w.levels[layer]
            cn, fn = out_n.levels[layer]
            glob = glob + cga_loss(cw, cn)
            if mode == "cga_sam":
                wq, wk = params[f"sam.{j}.wq"], params[f"sam.{j}.wk"]
                loc = loc + local_loss(spatial_attention(fw, cw, wq, wk), spatial_attention(fn, cn, wq, wk), lam)
    total = cls_wl + cls_nbi + glob + loc
    return LossBreakdown(cls_wl, cls_nbi, glob, loc, total)


def response_maps(params: Params, cfg: ModelConfig, out: BackboneOutput, level: int = 0):
    """Response maps of one pass (no graph) as :class:`ResponseMap` objects."""
    layer = cfg.align_layers[level]
    cls, patches = out.levels[layer]
    with T.no_grad():
        r = spatial_attention(patches, cls, params[f"sam.{level}.wq"], params[f"sam.{level}.wk"])
    return [ResponseMap(row, out.modality) for row in r.data]
