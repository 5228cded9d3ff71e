"""Datasets and deterministic augmentation.

Two sources: IDX image/label files (MNIST-style) and a procedural pattern
generator whose classes are distinct sinusoidal/checker/plaid textures.
Augmentation is a pure function of (seed, epoch, sample index) via
counter-based streams, so worker order can never change a run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .errors import ConfigError, FormatError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray      # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray      # N int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise FormatError("dataset images/labels lengths disagree or empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class AugmentSpec:
    crop_scale: tuple = (0.6, 1.0)   # area fraction range of the random crop
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    out_size: int = 32

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must be a probability")
        if self.out_size < 1:
            raise ConfigError("out_size must be positive")


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_idx(path, magic, ndim):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file {path}: {exc}") from exc
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    got_magic = struct.unpack(">I", raw[:4])[0]
    if got_magic != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None) -> LabeledDataset:
    """Load a paired IDX image/label file set, normalized to [0, 1]."""
    images = _read_idx(images_path, IDX_MAGIC_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_MAGIC_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes")
    n, h, w = images.shape
    imgs = (images.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    return LabeledDataset(imgs, labels.astype(np.int64), num_classes)


# ---------------------------------------------------------------------------
# synthetic patterns
# ---------------------------------------------------------------------------

_PATTERN_KINDS = 4  # near-horizontal grating, near-vertical grating, checker, plaid

# per-sample nuisance ranges; classes stay pixel-centroid separable while
# single samples scatter along axes the augmentations vary (scale, tone)
_FREQ_JITTER = 0.15
_ANGLE_JITTER = np.pi / 7


def _oriented_grating(size: int, freq: float, angle: float) -> np.ndarray:
    t = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))


def _class_sample(cls: int, size: int, gen) -> np.ndarray:
    """One texture draw for a class, in [-1, 1]; flip- and crop-stable.

    The class fixes kind and frequency band; the draw jitters frequency and
    orientation inside the band so single samples spread while class means
    stay distinct.
    """
    kind = cls % _PATTERN_KINDS
    base_freq = 3.0 + 3.0 * (cls // _PATTERN_KINDS)
    if base_freq * (1 + _FREQ_JITTER) >= size / 2:
        raise ConfigError(
            f"class {cls} needs frequency {base_freq}, above Nyquist for size {size}")
    freq = base_freq * (1 + gen.uniform(-_FREQ_JITTER, _FREQ_JITTER))
    tilt = gen.uniform(-_ANGLE_JITTER, _ANGLE_JITTER)
    if kind == 0:
        return _oriented_grating(size, freq, tilt)                 # near-horizontal
    if kind == 1:
        return _oriented_grating(size, freq, np.pi / 2 + tilt)     # near-vertical
    a = _oriented_grating(size, freq, tilt)
    b = _oriented_grating(size, freq, np.pi / 2 + tilt)
    if kind == 2:
        return a * b                                               # checker
    return (a + b) / 2.0                                           # plaid


def synth_shapes(num_classes: int, per_class: int, size: int = 32,
                 seed: int = 0, noise_std: float = 0.08) -> LabeledDataset:
    """Procedural dataset: class textures + per-sample contrast/offset/noise."""
    if num_classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1 (empty class)")
    images = np.empty((num_classes * per_class, 1, size, size), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for cls in range(num_classes):
        gen = streams.stream_rng(seed, streams.SYNTH, cls)
        lo = cls * per_class
        for i in range(per_class):
            base = _class_sample(cls, size, gen)
            amp = gen.uniform(0.2, 0.4)
            offset = gen.uniform(-0.1, 0.1)
            noise = gen.normal(0.0, noise_std, size=(size, size))
            img = 0.5 + amp * base + offset + noise
            images[lo + i, 0] = np.clip(img, 0.0, 1.0)
        labels[lo:lo + per_class] = cls
    return LabeledDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """C x H x W bilinear resize with half-pixel centers (identity at scale 1)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(img.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(img.dtype)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy[None, :, None]) + bot * wy[None, :, None]


def _one_view(img: np.ndarray, spec: AugmentSpec, gen) -> np.ndarray:
    c, h, w = img.shape
    lo, hi = spec.crop_scale
    area = gen.uniform(lo, hi)
    side_h = max(int(round(h * np.sqrt(area))), 1)
    side_w = max(int(round(w * np.sqrt(area))), 1)
    top = int(gen.integers(0, h - side_h + 1))
    left = int(gen.integers(0, w - side_w + 1))
    crop = img[:, top:top + side_h, left:left + side_w]
    if gen.random() < spec.flip_prob:
        crop = crop[:, :, ::-1]
    out = _bilinear_resize(crop, spec.out_size, spec.out_size)
    if spec.brightness:
        out = out + img.dtype.type(gen.uniform(-spec.brightness, spec.brightness))
    if spec.contrast:
        factor = img.dtype.type(gen.uniform(1 - spec.contrast, 1 + spec.contrast))
        mean = out.mean()
        out = (out - mean) * factor + mean
    return np.clip(out, 0.0, 1.0)


def augment_pair(image: np.ndarray, spec: AugmentSpec, seed: int, epoch: int,
                 index: int):
    """Two independently augmented views; pure in (seed, epoch, index)."""
    gen = streams.stream_rng(seed, streams.AUGMENT, epoch, index)
    return _one_view(image, spec, gen), _one_view(image, spec, gen)


def augment_view(image: np.ndarray, spec: AugmentSpec, gen) -> np.ndarray:
    """Single augmented view drawn from a caller-provided generator."""
    return _one_view(image, spec, gen)


def augment_batch(images: np.ndarray, indices, spec: AugmentSpec, seed: int,
                  epoch: int):
    """Stacked (v, v') views for a batch of dataset indices."""
    n = len(indices)
    v = np.empty((n, images.shape[1], spec.out_size, spec.out_size),
                 dtype=images.dtype)
    vp = np.empty_like(v)
    for row, idx in enumerate(indices):
        v[row], vp[row] = augment_pair(images[idx], spec, seed, epoch, int(idx))
    return v, vp


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_semi(dataset: LabeledDataset, fraction: float, seed: int):
    """Class-balanced labeled subset of ceil(fraction * N_c) per class."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    keep = []
    rest = []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size == 0:
            raise ConfigError(f"class {cls} has no examples to split")
        k = int(np.ceil(fraction * members.size))
        order = streams.stream_rng(seed, streams.SPLIT, cls).permutation(members.size)
        keep.append(np.sort(members[order[:k]]))
        rest.append(np.sort(members[order[k:]]))
    keep = np.concatenate(keep)
    rest = np.concatenate(rest)
    return dataset.subset(keep), dataset.subset(rest) if rest.size else None
