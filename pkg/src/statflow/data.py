"""In-memory labeled image datasets and the bundled procedural toy set.

The toy generator draws 10 shape classes (circle, square, triangle,
ring, cross, horizontal/vertical stripes, checkerboard, dot cluster,
diagonal split) on cluttered backgrounds. Each class anchors a hue with
heavy jitter so neighbouring classes overlap in color and the shape
carries part of the signal; this keeps single-image probes off the
ceiling while leaving the full dataset linearly separable.

Images are float32 in the canonical [0, 1] range, shape (N, 3, R, R).
External datasets load from .npz files with "images"/"labels" arrays
and are deterministically resized (bilinear) to the encoder resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .kernels import resize_bilinear


@dataclass
class Dataset:
    """A labeled image collection held in memory."""

    images: np.ndarray  # (N, C, R, R) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValidationError("images must be (N, C, R, R) with matching labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def class_indices(self) -> list:
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (images, labels) batches, optionally in shuffled order."""
        order = np.arange(len(self))
        if rng is not None:
            order = rng.permutation(order)
        for i in range(0, len(order), batch_size):
            sel = order[i:i + batch_size]
            yield self.images[sel], self.labels[sel]


# -- toy generator -------------------------------------------------------

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def _hsv_to_rgb(h, s, v):
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    r = np.choose(i, [c[0] for c in table])
    g = np.choose(i, [c[1] for c in table])
    b = np.choose(i, [c[2] for c in table])
    return np.stack([r, g, b])


def _shape_mask(cls, yy, xx, cy, cx, s, rng):
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    if cls == 0:  # filled circle
        return r < s
    if cls == 1:  # filled square
        return np.maximum(np.abs(dy), np.abs(dx)) < s
    if cls == 2:  # upward triangle
        return (dy > -s) & (dy < s) & (np.abs(dx) < (s - dy) * 0.6)
    if cls == 3:  # ring
        return (r < s) & (r > 0.55 * s)
    if cls == 4:  # plus sign
        arm = 0.35 * s
        box = np.maximum(np.abs(dy), np.abs(dx)) < s
        return box & ((np.abs(dy) < arm) | (np.abs(dx) < arm))
    if cls == 5:  # horizontal stripes in a disc
        period = max(3.0, 0.5 * s)
        return (r < 1.2 * s) & (np.mod(dy, period) < 0.5 * period)
    if cls == 6:  # vertical stripes in a disc
        period = max(3.0, 0.5 * s)
        return (r < 1.2 * s) & (np.mod(dx, period) < 0.5 * period)
    if cls == 7:  # checkerboard square
        period = max(3.0, 0.55 * s)
        cells = (np.floor(dy / period) + np.floor(dx / period)) % 2 == 0
        return cells & (np.maximum(np.abs(dy), np.abs(dx)) < s)
    if cls == 8:  # cluster of dots
        mask = np.zeros_like(yy, dtype=bool)
        for _ in range(5):
            oy, ox = rng.uniform(-0.8 * s, 0.8 * s, size=2)
            mask |= np.hypot(dy - oy, dx - ox) < 0.3 * s
        return mask
    if cls == 9:  # diagonal half-disc
        return (r < 1.1 * s) & (dy + dx > 0)
    raise ValidationError(f"toy generator supports 10 classes, got class {cls}")


def make_toy_dataset(
    num_classes: int = 10,
    per_class: int = 200,
    resolution: int = 32,
    seed: int = 0,
    split: str = "train",
    hue_jitter: float = 0.10,
    noise_sigma: float = 0.06,
) -> Dataset:
    """Generate the bundled procedural toy dataset (no downloads)."""
    if num_classes > 10:
        raise ValidationError("toy generator supports at most 10 classes")
    if split not in _SPLIT_CODES:
        raise ValidationError(f"unknown split {split!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence([0x70F0, seed, _SPLIT_CODES[split]])
    )
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    images = np.empty((num_classes * per_class, 3, resolution, resolution), np.float32)
    labels = np.empty(num_classes * per_class, np.int64)
    n = 0
    for c in range(num_classes):
        for _ in range(per_class):
            bg_hue = rng.uniform(0.0, 1.0)
            bg = _hsv_to_rgb(
                np.full((resolution, resolution), bg_hue),
                np.full((resolution, resolution), rng.uniform(0.05, 0.35)),
                np.full((resolution, resolution), rng.uniform(0.25, 0.75)),
            )
            hue = c / num_classes + rng.normal(0.0, hue_jitter)
            fg = _hsv_to_rgb(
                np.full((resolution, resolution), hue),
                np.full((resolution, resolution), rng.uniform(0.6, 1.0)),
                np.full((resolution, resolution), rng.uniform(0.6, 1.0)),
            )
            cy = resolution / 2 + rng.uniform(-0.12, 0.12) * resolution
            cx = resolution / 2 + rng.uniform(-0.12, 0.12) * resolution
            s = rng.uniform(0.22, 0.38) * resolution
            mask = _shape_mask(c, yy, xx, cy, cx, s, rng)[None]
            img = np.where(mask, fg, bg)
            img += rng.normal(0.0, noise_sigma, size=img.shape)
            images[n] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[n] = c
            n += 1
    return Dataset(images, labels, num_classes)


def load_dataset_npz(path: str, resolution: int | None = None) -> Dataset:
    """Load images/labels from an .npz file, resizing if needed.

    Expects float images in [0, 1] (or uint8, which is rescaled) of
    shape (N, C, R, R) and integer labels.
    """
    with np.load(path) as z:
        if "images" not in z or "labels" not in z:
            raise ValidationError(f"{path} must contain 'images' and 'labels'")
        images = z["images"]
        labels = np.asarray(z["labels"], dtype=np.int64)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValidationError("images must have shape (N, C, R, R)")
    if resolution is not None and images.shape[-1] != resolution:
        images = resize_bilinear(images, resolution).astype(np.float32)
        images = np.clip(images, 0.0, 1.0)
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images, labels, num_classes)


def resize_images(images: np.ndarray, resolution: int) -> np.ndarray:
    """Deterministic bilinear resize to a square target resolution."""
    out = resize_bilinear(np.asarray(images, dtype=np.float32), resolution)
    return np.clip(out, 0.0, 1.0)
