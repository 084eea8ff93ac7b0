"""Shared Vision Transformer backbone.

One parameter dictionary serves both modalities; the modality tag passed to
:func:`forward` only labels the output. Layout conventions:

* patches are taken in raster order, each flattened row-major as (row, col,
  channel) with channels innermost;
* the class token sits at sequence index 0 and receives positional row 0;
* per-head query/key/value matrices are stored side by side as one ``d x d``
  matrix per role, head ``i`` owning columns ``i*d' : (i+1)*d'``;
* ``input.mean`` / ``input.std`` are fixed per-channel standardisation
  buffers (set from training data, never optimised) applied before patching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = Dict[str, Tensor]

INIT_STD = 0.02
_ZERO_INIT = {"beta", "bias", "bq", "bk", "bv", "bo", "b1", "b2", "cls_token"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 96
    num_heads: int = 6
    depth: int = 4
    num_classes: int = 2
    mlp_ratio: int = 4
    sam_dim: Optional[int] = None
    align_layers: Tuple[int, ...] = (-1,)
    paper_faithful: bool = True

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_heads, self.depth) < 1:
            raise ConfigError(f"all model sizes must be positive: {self}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.paper_faithful and 2 * self.embed_dim != 3 * self.patch_size ** 2:
            raise ConfigError(f"embed dim must be 3P^2/2 = {3 * self.patch_size ** 2 / 2}, got {self.embed_dim}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        for layer in self.align_layers:
            if not -1 <= layer < self.depth:
                raise ConfigError(f"alignment layer {layer} outside [-1, {self.depth})")
        object.__setattr__(self, "align_layers", tuple(int(x) for x in self.align_layers))

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """224 px, P=16: N=196, d=384, h=6, d'=64, 12 blocks."""
        kw = dict(image_size=224, patch_size=16, embed_dim=384, num_heads=6, depth=12)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """64 px, P=8: N=64, d=96, h=6, d'=16."""
        kw = dict(image_size=64, patch_size=8, embed_dim=96, num_heads=6, depth=4)
        kw.update(overrides)
        return cls(**kw)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def sam_width(self) -> int:
        return self.sam_dim or self.embed_dim


def param_specs(cfg: ModelConfig, with_sam: bool = True) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter name and shape, in the fixed checkpoint order."""
    d, n, hidden = cfg.embed_dim, cfg.num_patches, cfg.mlp_ratio * cfg.embed_dim
    specs = [
        ("input.mean", (3,)),
        ("input.std", (3,)),
        ("patch_embed.weight", (cfg.patch_dim, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (n + 1, d)),
    ]
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        specs += [
            (b + "ln1.gamma", (d,)), (b + "ln1.beta", (d,)),
            (b + "attn.wq", (d, d)), (b + "attn.bq", (d,)),
            (b + "attn.wk", (d, d)), (b + "attn.bk", (d,)),
            (b + "attn.wv", (d, d)), (b + "attn.bv", (d,)),
            (b + "attn.wo", (d, d)), (b + "attn.bo", (d,)),
            (b + "ln2.gamma", (d,)), (b + "ln2.beta", (d,)),
            (b + "mlp.w1", (d, hidden)), (b + "mlp.b1", (hidden,)),
            (b + "mlp.w2", (hidden, d)), (b + "mlp.b2", (d,)),
        ]
    specs += [
        ("norm.gamma", (d,)), ("norm.beta", (d,)),
        ("head.weight", (d, cfg.num_classes)), ("head.bias", (cfg.num_classes,)),
    ]
    if with_sam:
        for j in range(len(cfg.align_layers)):
            specs += [(f"sam.{j}.wq", (d, cfg.sam_width)), (f"sam.{j}.wk", (d, cfg.sam_width))]
    return specs


def is_sam_param(name: str) -> bool:
    return name.startswith("sam.")


def is_buffer(name: str) -> bool:
    return name.startswith("input.")


def count_params(cfg: ModelConfig, with_sam: bool = False) -> int:
    """Learnable parameter count (standardisation buffers excluded)."""
    return int(sum(np.prod(shape) for name, shape in param_specs(cfg, with_sam) if not is_buffer(name)))


def trainable(params: Params) -> Params:
    return {k: v for k, v in params.items() if not is_buffer(k)}


def set_input_stats(params: Params, mean, std) -> None:
    """Install per-channel standardisation statistics."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"channel std must be positive, got {std}")
    params["input.mean"].data[...] = np.asarray(mean)
    params["input.std"].data[...] = std


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32, with_sam: bool = True) -> Params:
    params: Params = {}
    for name, shape in param_specs(cfg, with_sam):
        leaf = name.rsplit(".", 1)[-1]
        if name == "input.mean":
            arr = np.zeros(shape)
        elif leaf == "gamma" or name == "input.std":
            arr = np.ones(shape)
        elif leaf in _ZERO_INIT:
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, INIT_STD)
        params[name] = Tensor(arr.astype(dtype), requires_grad=not is_buffer(name))
    return params


def strip_sam(params: Params) -> Params:
    """The deployable parameter set: everything except the training-only alignment projections."""
    return {k: v for k, v in params.items() if not is_sam_param(k)}


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, 3]`` -> ``[..., N, 3P^2]`` in raster order, channels innermost."""
    images = np.asarray(images)
    if images.ndim not in (3, 4) or images.shape[-1] != 3:
        raise ConfigError(f"expected [H, W, 3] or [B, H, W, 3] images, got {images.shape}")
    single = images.ndim == 3
    x = images[None] if single else images
    b, h, w, _ = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    out = x.reshape(b, (h // p) * (w // p), p * p * 3)
    return out[0] if single else out


def embed(params: Params, cfg: ModelConfig, images: np.ndarray) -> Tensor:
    """Class token + projected patches + positional embedding: ``[B, N+1, d]``."""
    w = params["patch_embed.weight"]
    x = (np.asarray(images, dtype=w.dtype) - params["input.mean"].data) / params["input.std"].data
    patches = Tensor(patchify(x, cfg.patch_size))
    if patches.ndim == 2:
        patches = T.reshape(patches, (1,) + patches.shape)
    tokens = patches @ w + params["patch_embed.bias"]
    b = tokens.shape[0]
    cls = Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=w.dtype)) + params["cls_token"]
    return T.concat([cls, tokens], axis=1) + params["pos_embed"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def block_forward(params: Params, cfg: ModelConfig, x: Tensor, index: int,
                  attn_sink: Optional[list] = None) -> Tensor:
    """Pre-LN block: ``x + MSA(LN(x))`` then ``+ FFN(LN(.))``."""
    p = f"blocks.{index}."
    b, n, d = x.shape
    h = T.layernorm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
    q = _split_heads(h @ params[p + "attn.wq"] + params[p + "attn.bq"], cfg.num_heads)
    k = _split_heads(h @ params[p + "attn.wk"] + params[p + "attn.bk"], cfg.num_heads)
    v = _split_heads(h @ params[p + "attn.wv"] + params[p + "attn.bv"], cfg.num_heads)
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(cfg.head_dim))
    attn = T.softmax(scores)
    if attn_sink is not None:
        attn_sink.append(attn.data)
    heads = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, n, d))
    x = x + (heads @ params[p + "attn.wo"] + params[p + "attn.bo"])
    h = T.layernorm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
    m = T.gelu(h @ params[p + "mlp.w1"] + params[p + "mlp.b1"]) @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
    return x + m


@dataclass
class BackboneOutput:
    """Post-LN features of one modality pass.

    ``levels`` maps each alignment layer index to its (class, patch)
    features; -1 is the final external LN output.
    """

    cls: Tensor
    patches: Tensor
    modality: str = "w"
    attn: List[np.ndarray] = field(default_factory=list)
    levels: Dict[int, Tuple[Tensor, Tensor]] = field(default_factory=dict)


def _external_norm(params: Params, x: Tensor) -> Tuple[Tensor, Tensor]:
    out = T.layernorm(x, params["norm.gamma"], params["norm.beta"])
    return out[:, 0, :], out[:, 1:, :]


def forward(params: Params, cfg: ModelConfig, images: np.ndarray, modality: str = "w",
            capture_attn: bool = False) -> BackboneOutput:
    if modality not in ("w", "n"):
        raise ValueError(f"modality tag must be 'w' or 'n', got {modality!r}")
    x = embed(params, cfg, images)
    sink: Optional[list] = [] if capture_attn else None
    levels: Dict[int, Tuple[Tensor, Tensor]] = {}
    wanted = set(cfg.align_layers) - {-1, cfg.depth - 1}
    for i in range(cfg.depth):
        x = block_forward(params, cfg, x, i, sink)
        if i in wanted:
            levels[i] = _external_norm(params, x)
    cls, patches = _external_norm(params, x)
    levels[-1] = (cls, patches)
    if cfg.depth - 1 in cfg.align_layers:
        levels[cfg.depth - 1] = (cls, patches)
    return BackboneOutput(cls, patches, modality, sink or [], levels)


def classify(params: Params, cls: Tensor) -> Tensor:
    """Linear head on class features; returns logits (no softmax)."""
    if cls.ndim == 1:
        cls = T.reshape(cls, (1, cls.shape[0]))
    return cls @ params["head.weight"] + params["head.bias"]
