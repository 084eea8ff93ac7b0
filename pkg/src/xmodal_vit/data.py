"""Paired WL/NBI samples: manifest I/O, lesion cropping, pair-synchronised
augmentation, subject-level k-fold splits and a synthetic paired generator.

Manifest format (CSV, paths relative to the manifest's directory)::

    wl_path,nbi_path,label,subject_id,bbox_wl,bbox_nbi
    pairs/0000_wl.ppm,pairs/0000_nbi.ppm,1,s07,4:6:50:48,

Labels: 0 = hyperplastic, 1 = adenomatous. Boxes are ``x:y:w:h`` in pixels
or empty.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import pnm

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["wl_path", "nbi_path", "label", "subject_id", "bbox_wl", "bbox_nbi"]
LABEL_NAMES = {0: "hyperplastic", 1: "adenomatous"}

BBox = Tuple[int, int, int, int]


class DataError(ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, row: int, message: str):
        super().__init__(f"manifest row {row}: {message}")
        self.row = row


@dataclass
class PairedSample:
    wl: np.ndarray
    nbi: np.ndarray
    label: int
    subject_id: str
    bbox_wl: Optional[BBox] = None
    bbox_nbi: Optional[BBox] = None
    sample_id: str = ""

    def __post_init__(self):
        if self.label not in LABEL_NAMES:
            raise DataError(f"label must be 0 or 1, got {self.label}")
        for name in ("wl", "nbi"):
            img = getattr(self, name)
            if img.ndim != 3 or img.shape[2] != 3 or min(img.shape[:2]) < 1:
                raise DataError(f"{name} image must be [H, W, 3], got {img.shape}")
        for name, box, img in (("bbox_wl", self.bbox_wl, self.wl), ("bbox_nbi", self.bbox_nbi, self.nbi)):
            if box is not None and not bbox_inside(box, img.shape):
                raise DataError(f"{name} {box} lies outside image of size {img.shape[1]}x{img.shape[0]}")


def bbox_inside(box: BBox, shape) -> bool:
    x, y, w, h = box
    return w > 0 and h > 0 and x >= 0 and y >= 0 and x + w <= shape[1] and y + h <= shape[0]


def parse_bbox(text: str) -> Optional[BBox]:
    text = text.strip()
    if not text:
        return None
    parts = text.split(":")
    if len(parts) != 4:
        raise ValueError(f"bbox must be x:y:w:h, got {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def format_bbox(box: Optional[BBox]) -> str:
    return "" if box is None else ":".join(str(int(v)) for v in box)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def load_manifest(path: str | os.PathLike, strict: bool = True) -> List[PairedSample]:
    """Load every row of a manifest, in file order.

    In strict mode the first bad row raises :class:`ManifestError`; otherwise
    bad rows are skipped with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    samples: List[PairedSample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return samples
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(1, f"header must be {','.join(MANIFEST_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            try:
                samples.append(_parse_row(row, rowno, root))
            except ManifestError as exc:
                if strict:
                    raise
                warnings.warn(str(exc), stacklevel=2)
                logger.warning("skipping %s", exc)
    return samples


def _parse_row(row: List[str], rowno: int, root: Path) -> PairedSample:
    if len(row) != len(MANIFEST_HEADER):
        raise ManifestError(rowno, f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
    wl_path, nbi_path, label, subject, bbox_wl, bbox_nbi = (c.strip() for c in row)
    try:
        label_i = int(label)
        boxes = parse_bbox(bbox_wl), parse_bbox(bbox_nbi)
    except ValueError as exc:
        raise ManifestError(rowno, str(exc)) from None
    images = []
    for rel in (wl_path, nbi_path):
        full = root / rel
        if not full.exists():
            raise ManifestError(rowno, f"image not found: {full}")
        try:
            images.append(pnm.read_ppm(full))
        except (pnm.PNMError, OSError) as exc:
            raise ManifestError(rowno, f"cannot decode {full}: {exc}") from None
    try:
        return PairedSample(images[0], images[1], label_i, subject, boxes[0], boxes[1],
                            sample_id=Path(wl_path).stem)
    except DataError as exc:
        raise ManifestError(rowno, str(exc)) from None


def write_dataset(samples: Sequence[PairedSample], out_dir: str | os.PathLike,
                  manifest_name: str = "manifest.csv") -> Path:
    """Write PPM pairs plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        stem = s.sample_id or f"{i:05d}"
        wl_rel, nbi_rel = f"images/{stem}_wl.ppm", f"images/{stem}_nbi.ppm"
        pnm.write_ppm(out / wl_rel, s.wl)
        pnm.write_ppm(out / nbi_rel, s.nbi)
        rows.append([wl_rel, nbi_rel, str(s.label), s.subject_id, format_bbox(s.bbox_wl), format_bbox(s.bbox_nbi)])
    manifest = out / manifest_name
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping.

    Sampling is symmetric under horizontal mirroring, so resizing commutes
    with flips.
    """
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    fy = fy[:, None, None]
    return top * (1 - fy) + bot * fy


def crop(img: np.ndarray, box: BBox) -> np.ndarray:
    x, y, w, h = box
    return img[y:y + h, x:x + w]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def mirror_bbox(box: BBox, width: int) -> BBox:
    x, y, w, h = box
    return (width - x - w, y, w, h)


def crop_bbox(sample: PairedSample, size: int) -> PairedSample:
    """Crop each modality to its own box and resize both to ``size`` x ``size``."""
    out = {}
    for name, box in (("wl", sample.bbox_wl), ("nbi", sample.bbox_nbi)):
        img = getattr(sample, name)
        if box is None:
            warnings.warn(f"sample {sample.sample_id or '?'}: no {name} bbox, resizing whole image", stacklevel=2)
        else:
            img = crop(img, box)
        out[name] = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
    return replace(sample, wl=out["wl"], nbi=out["nbi"], bbox_wl=None, bbox_nbi=None)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

CROP_SCALE = (0.7, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)
FLIP_P = 0.5


@dataclass(frozen=True)
class AugmentParams:
    """Crop window in normalised image coordinates plus a flip decision."""

    x: float
    y: float
    w: float
    h: float
    flip: bool

    def window(self, shape) -> BBox:
        H, W = shape[:2]
        x, y = int(round(self.x * W)), int(round(self.y * H))
        w = max(1, min(W - x, int(round(self.w * W))))
        h = max(1, min(H - y, int(round(self.h * H))))
        return (x, y, w, h)


def sample_augment_params(rng: np.random.Generator, height: int, width: int,
                          scale=CROP_SCALE, ratio=CROP_RATIO, flip_p: float = FLIP_P) -> AugmentParams:
    """Random-resized-crop window (area fraction ``scale``, aspect ``ratio``) and flip."""
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    box = None
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            box = (x, y, w, h)
            break
    if box is None:
        box = (0, 0, width, height)
    flip = bool(rng.uniform() < flip_p)
    x, y, w, h = box
    return AugmentParams(x / width, y / height, w / width, h / height, flip)


def apply_augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = resize_bilinear(crop(img, params.window(img.shape)), img.shape[0], img.shape[1])
    return hflip(out) if params.flip else out


def augment(sample: PairedSample, rng: np.random.Generator) -> Tuple[PairedSample, AugmentParams]:
    """Apply one random crop + flip draw to *both* modalities.

    Sharing the draw keeps WL and NBI spatially corresponding, which the
    response-map alignment relies on.
    """
    params = sample_augment_params(rng, *sample.wl.shape[:2])
    wl = apply_augment(sample.wl, params)
    nbi = apply_augment(sample.nbi, params)
    check_pair_sync(sample, params)
    return replace(sample, wl=wl, nbi=nbi), params


def check_pair_sync(sample: PairedSample, params: AugmentParams) -> None:
    """Both modalities must map to the same normalised window."""
    for img in (sample.wl, sample.nbi):
        x, y, w, h = params.window(img.shape)
        H, W = img.shape[:2]
        if abs(x / W - params.x) > 1.0 / W or abs(w / W - params.w) > 1.0 / W or \
                abs(y / H - params.y) > 1.0 / H or abs(h / H - params.h) > 1.0 / H:
            raise AssertionError(f"augmentation window drifted between modalities of {sample.sample_id}")


# ---------------------------------------------------------------------------
# subject-level k-fold
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    folds: List[List[str]]
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def subjects(self) -> List[str]:
        return sorted(s for f in self.folds for s in f)

    def val_subjects(self, i: int) -> set:
        return set(self.folds[i])

    def train_subjects(self, i: int) -> set:
        if self.k == 1:
            # degenerate single fold: train and validate on everything
            return set(self.folds[0])
        return {s for j, f in enumerate(self.folds) if j != i for s in f}

    def split(self, samples: Sequence[PairedSample], i: int) -> Tuple[List[PairedSample], List[PairedSample]]:
        tr, va = self.train_subjects(i), self.val_subjects(i)
        return [s for s in samples if s.subject_id in tr], [s for s in samples if s.subject_id in va]


def subject_kfold(samples: Iterable, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle distinct subjects with ``seed`` and deal them round-robin into ``k`` folds.

    ``samples`` may be PairedSamples or bare subject ids.
    """
    ids = sorted({s.subject_id if isinstance(s, PairedSample) else str(s) for s in samples})
    if k < 1 or len(ids) < k:
        raise DataError(f"need at least k={k} distinct subjects, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds: List[List[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    return FoldSplit([sorted(f) for f in folds], seed)


# ---------------------------------------------------------------------------
# synthetic paired data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticGenConfig:
    """Synthetic WL/NBI pair generator settings.

    NBI renders the class texture at ``nbi_contrast``; WL multiplies that
    contrast by ``wl_attenuation`` and adds Gaussian noise ``wl_noise``.
    """

    image_size: int = 64
    samples_per_class: int = 200
    n_subjects: int = 40
    seed: int = 0
    nbi_contrast: float = 0.9
    wl_attenuation: float = 0.2
    wl_noise: float = 0.06
    texture_period: float = 6.0
    with_bbox: bool = False


def _smooth_field(rng: np.random.Generator, size: int, n_waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(-2.5, 2.5, size=2)
        out += np.cos(2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))
    return out / n_waves


def _texture(label: int, size: int, period: float, rng: np.random.Generator, angle: float) -> np.ndarray:
    """Vessel density in [0, 1]: dense oriented stripes (1) or sparse dots (0)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    if label == 1:
        u = xx * math.cos(angle) + yy * math.sin(angle)
        return 0.5 * (1.0 + np.sin(2 * math.pi * u / period + phase))
    phase2 = rng.uniform(0, 2 * math.pi)
    dots = np.cos(2 * math.pi * xx / period + phase) * np.cos(2 * math.pi * yy / period + phase2)
    return np.clip(2.0 * dots - 1.0, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(config: SyntheticGenConfig = SyntheticGenConfig()) -> List[PairedSample]:
    """Deterministic paired dataset; images are 8-bit quantised so PPM round-trips exactly."""
    rng = np.random.default_rng(config.seed)
    s = config.image_size
    n = 2 * config.samples_per_class
    if config.n_subjects < 1:
        raise DataError("need at least one subject")
    # per-subject lesion geometry and colouring
    styles = []
    for _ in range(config.n_subjects):
        styles.append(dict(
            cx=0.5 + rng.uniform(-0.12, 0.12), cy=0.5 + rng.uniform(-0.12, 0.12),
            rx=rng.uniform(0.22, 0.36), ry=rng.uniform(0.22, 0.36), rot=rng.uniform(0, math.pi),
            mucosa=np.array([0.78, 0.42, 0.38]) + rng.uniform(-0.06, 0.06, size=3),
            lesion=np.array([0.70, 0.36, 0.34]) + rng.uniform(-0.08, 0.08, size=3),
        ))
    labels = np.array([0] * config.samples_per_class + [1] * config.samples_per_class)
    labels = labels[rng.permutation(n)]
    subjects = np.arange(n) % config.n_subjects
    rng.shuffle(subjects)
    tint = np.array([-0.8, -0.45, -0.15])  # vessels darken, mostly in red
    yy, xx = np.mgrid[0:s, 0:s] / s
    samples = []
    for i in range(n):
        st = styles[subjects[i]]
        cx, cy = st["cx"] + rng.normal(0, 0.04), st["cy"] + rng.normal(0, 0.04)
        rx, ry = st["rx"] * rng.uniform(0.85, 1.15), st["ry"] * rng.uniform(0.85, 1.15)
        rot = st["rot"] + rng.normal(0, 0.3)
        dx, dy = xx - cx, yy - cy
        u = (dx * math.cos(rot) + dy * math.sin(rot)) / rx
        v = (-dx * math.sin(rot) + dy * math.cos(rot)) / ry
        mask = 1.0 / (1.0 + np.exp((np.sqrt(u * u + v * v) - 1.0) * 12.0))
        shade = 0.08 * _smooth_field(rng, s)
        base = st["mucosa"][None, None] * (1 - mask[..., None]) + st["lesion"][None, None] * mask[..., None]
        base = base + shade[..., None]
        angle = rng.uniform(0, math.pi)
        tex = _texture(int(labels[i]), s, config.texture_period, rng, angle)
        pattern = (tex * mask)[..., None] * tint[None, None]
        nbi = base + config.nbi_contrast * pattern
        wl = base + config.nbi_contrast * config.wl_attenuation * pattern
        if config.wl_noise > 0:
            wl = wl + rng.normal(0.0, config.wl_noise, size=wl.shape)
        bbox = None
        if config.with_bbox:
            half_w = int(math.ceil((max(rx, ry) + 0.08) * s))
            x0 = max(0, int(cx * s) - half_w)
            y0 = max(0, int(cy * s) - half_w)
            bbox = (x0, y0, min(s, int(cx * s) + half_w) - x0, min(s, int(cy * s) + half_w) - y0)
        samples.append(PairedSample(
            wl=_quantize(wl), nbi=_quantize(nbi), label=int(labels[i]),
            subject_id=f"s{subjects[i]:03d}", bbox_wl=bbox, bbox_nbi=bbox, sample_id=f"{i:05d}",
        ))
    return samples


def stack_images(samples: Sequence[PairedSample], modality: str = "wl") -> np.ndarray:
    return np.stack([getattr(s, modality) for s in samples])


def class_counts(samples: Sequence[PairedSample]) -> Dict[int, int]:
    counts = {0: 0, 1: 0}
    for s in samples:
        counts[s.label] += 1
    return counts
