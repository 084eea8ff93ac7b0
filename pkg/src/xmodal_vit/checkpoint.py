"""Binary checkpoint format.

Layout (all little-endian)::

    8 bytes   magic  b"XMVITCK\\x01"
    int32[12] image_size, patch_size, embed_dim, num_heads, depth, num_classes,
              mlp_ratio, sam_dim (0 = embed_dim), paper_faithful, has_sam,
              float_bytes (4 or 8), n_align
    int32[n_align]  alignment layer indices (-1 = final)
    raw IEEE-754 arrays, one per parameter, in ``vit.param_specs`` order:
              the input standardisation buffers first, then the backbone,
              head and (unless pruned) the ``sam.*`` projections

A pruned checkpoint has ``has_sam = 0`` and simply omits the ``sam.*``
arrays. A plain-text sidecar ``<path>.manifest.txt`` lists
``name shape offset nbytes`` for each array.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from .tensor import Tensor
from .vit import ModelConfig, Params, is_buffer, param_specs

MAGIC = b"XMVITCK\x01"
_HEAD = struct.Struct("<12i")


class CheckpointError(ValueError):
    pass


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.txt")


def save(path: str | os.PathLike, cfg: ModelConfig, params: Params, prune: bool = False) -> None:
    has_sam = (not prune) and any(k.startswith("sam.") for k in params)
    specs = param_specs(cfg, with_sam=has_sam)
    dtype = params["head.weight"].dtype
    if dtype not in (np.float32, np.float64):
        raise CheckpointError(f"unsupported parameter dtype {dtype}")
    le = dtype.newbyteorder("<")
    header = MAGIC + _HEAD.pack(
        cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.num_heads, cfg.depth, cfg.num_classes,
        cfg.mlp_ratio, cfg.sam_dim or 0, int(cfg.paper_faithful), int(has_sam), dtype.itemsize,
        len(cfg.align_layers),
    ) + struct.pack(f"<{len(cfg.align_layers)}i", *cfg.align_layers)
    lines = ["# name\tshape\toffset\tnbytes"]
    offset = len(header)
    chunks = [header]
    for name, shape in specs:
        if name not in params:
            raise CheckpointError(f"missing parameter {name}")
        arr = params[name].data
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {shape}")
        raw = np.ascontiguousarray(arr, dtype=le).tobytes()
        lines.append(f"{name}\t{'x'.join(map(str, shape))}\t{offset}\t{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    manifest_path(path).write_text("\n".join(lines) + "\n")


def load(path: str | os.PathLike) -> Tuple[ModelConfig, Params]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if len(buf) < 8 + _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    (img, patch, dim, heads, depth, classes, mlp, sam_dim, faithful, has_sam, fbytes,
     n_align) = _HEAD.unpack_from(buf, 8)
    pos = 8 + _HEAD.size
    align = struct.unpack_from(f"<{n_align}i", buf, pos)
    pos += 4 * n_align
    cfg = ModelConfig(image_size=img, patch_size=patch, embed_dim=dim, num_heads=heads, depth=depth,
                      num_classes=classes, mlp_ratio=mlp, sam_dim=sam_dim or None, align_layers=tuple(align),
                      paper_faithful=bool(faithful))
    if fbytes not in (4, 8):
        raise CheckpointError(f"{path}: unsupported float width {fbytes}")
    dtype = np.dtype("<f4" if fbytes == 4 else "<f8")
    params: Params = {}
    for name, shape in param_specs(cfg, with_sam=bool(has_sam)):
        count = int(np.prod(shape))
        if pos + count * fbytes > len(buf):
            raise CheckpointError(f"{path}: truncated at {name}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        params[name] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=not is_buffer(name))
        pos += count * fbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return cfg, params
