"""Learnable multi-resolution image parametrization and differentiable
augmentation.

A synthetic image is a sum of learnable levels, each bilinearly
upsampled to the target resolution, squashed through a logistic map so
pixels always land in [0, 1] (raw 0 composes to 0.5). Levels double in
resolution and are appended zero-initialized during optimization, which
leaves the composed image unchanged at the moment of addition.

Augmentation samples one concrete transform from a seed and applies it
to the whole batch; every op is differentiable w.r.t. the input pixels
and the output stays in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, ValidationError
from .kernels import resize_bilinear, resize_bilinear_adjoint

# documented upper bounds for augmentation magnitudes
MAGNITUDE_BOUNDS = {
    "brightness": 0.5,
    "saturation": 1.0,
    "contrast": 0.5,
    "translate": 0.25,
    "cutout": 0.5,
}

DEFAULT_INIT_STD = 0.1


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class PyramidImage:
    """One synthetic image as a growing stack of learnable levels."""

    def __init__(self, levels: list, target_resolution: int):
        if not levels:
            raise ValidationError("a pyramid needs at least one level")
        res = [lv.shape[-1] for lv in levels]
        if any(lv.ndim != 3 or lv.shape[-2] != lv.shape[-1] for lv in levels):
            raise ShapeError("levels must be (channels, r, r)")
        if sorted(res) != res or len(set(res)) != len(res):
            raise ValidationError("levels must strictly increase in resolution")
        if res[-1] > target_resolution:
            raise ValidationError("level resolution exceeds the target")
        self.levels = [np.asarray(lv) for lv in levels]
        self.target_resolution = int(target_resolution)

    @classmethod
    def create(cls, channels: int, base_resolution: int, target_resolution: int,
               rng: np.random.Generator, init_std: float = DEFAULT_INIT_STD,
               dtype=np.float32) -> "PyramidImage":
        """Noise-initialized base level (raw std init_std), nothing else."""
        base = rng.normal(0.0, init_std, size=(channels, base_resolution,
                                               base_resolution)).astype(dtype)
        return cls([base], target_resolution)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    @property
    def top_resolution(self) -> int:
        return self.levels[-1].shape[-1]

    def num_parameters(self) -> int:
        return int(sum(lv.size for lv in self.levels))

    def copy(self) -> "PyramidImage":
        return PyramidImage([lv.copy() for lv in self.levels],
                            self.target_resolution)

    def add_level(self) -> "PyramidImage":
        """Append a zero level at doubled (capped) resolution.

        No-op with a warning once the top level reaches the target.
        """
        if self.top_resolution >= self.target_resolution:
            warnings.warn("pyramid already at target resolution; add_level ignored")
            return self
        new_res = min(2 * self.top_resolution, self.target_resolution)
        self.levels.append(
            np.zeros((self.channels, new_res, new_res), dtype=self.levels[0].dtype)
        )
        return self

    def compose(self) -> np.ndarray:
        img, _ = self.compose_vjp()
        return img

    def compose_vjp(self):
        """Returns (image, vjp) with vjp mapping image-space gradients to
        per-level gradients."""
        r = self.target_resolution
        raw = np.zeros((self.channels, r, r), dtype=self.levels[0].dtype)
        for lv in self.levels:
            raw += resize_bilinear(lv, r)
        img = _sigmoid(raw)
        sig_grad = img * (1.0 - img)
        resolutions = [lv.shape[-1] for lv in self.levels]

        def vjp(gimg: np.ndarray) -> list:
            graw = np.asarray(gimg) * sig_grad
            return [resize_bilinear_adjoint(graw, rr) for rr in resolutions]

        return img, vjp


def default_base_resolution(target_resolution: int) -> int:
    """Two planned doublings (e.g. 32 -> base 8), floor of 4."""
    if target_resolution <= 4:
        return target_resolution
    return max(4, target_resolution // 4)


# -- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    """Op magnitudes (0 disables an op) plus the sampling seed."""

    seed: int = 0
    brightness: float = 0.25
    saturation: float = 0.5
    contrast: float = 0.25
    translate: float = 0.125
    cutout: float = 0.25
    flip: bool = True

    def __post_init__(self):
        for op, bound in MAGNITUDE_BOUNDS.items():
            v = getattr(self, op)
            if not 0.0 <= v <= bound:
                raise ValidationError(
                    f"{op} magnitude {v} outside [0, {bound}]"
                )

    def disabled(self) -> "AugmentParams":
        return replace(self, brightness=0.0, saturation=0.0, contrast=0.0,
                       translate=0.0, cutout=0.0, flip=False)


@dataclass(frozen=True)
class Transform:
    """Concrete sampled transform, shared by a whole batch."""

    brightness_shift: float
    saturation_scale: float
    contrast_scale: float
    shift_y: int
    shift_x: int
    cut_y: int
    cut_x: int
    cut_size: int
    do_flip: bool


def sample_transform(params: AugmentParams, resolution: int, step: int = 0,
                     pass_index: int = 0) -> Transform:
    """Deterministically sample a transform from (seed, step, pass)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([0xA36, params.seed, step, pass_index])
    )
    b = rng.uniform(-params.brightness, params.brightness) if params.brightness else 0.0
    s = 1.0 + (rng.uniform(-params.saturation, params.saturation) if params.saturation else 0.0)
    c = 1.0 + (rng.uniform(-params.contrast, params.contrast) if params.contrast else 0.0)
    max_shift = int(params.translate * resolution)
    sy = int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0
    sx = int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0
    cut = int(params.cutout * resolution)
    cy = int(rng.integers(0, resolution)) if cut else 0
    cx = int(rng.integers(0, resolution)) if cut else 0
    flip = bool(rng.integers(0, 2)) if params.flip else False
    return Transform(b, s, c, sy, sx, cy, cx, cut, flip)


def _shift2d(x: np.ndarray, sy: int, sx: int) -> np.ndarray:
    """Zero-padded integer shift of the trailing two axes."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys = slice(max(sy, 0), h + min(sy, 0))
    xs = slice(max(sx, 0), w + min(sx, 0))
    yr = slice(max(-sy, 0), h + min(-sy, 0))
    xr = slice(max(-sx, 0), w + min(-sx, 0))
    out[..., ys, xs] = x[..., yr, xr]
    return out


def apply_transform(images: np.ndarray, t: Transform) -> np.ndarray:
    out, _ = apply_transform_vjp(images, t)
    return out


def apply_transform_vjp(images: np.ndarray, t: Transform):
    """Apply the transform and return (output, vjp). Order: flip,
    translate, brightness, saturation, contrast, cutout, clip."""
    x = np.asarray(images)
    if x.ndim != 4:
        raise ShapeError("augment expects a (B, C, H, W) batch")
    b, c, h, w = x.shape
    steps = []  # backward closures, applied in reverse

    if t.do_flip:
        x = x[..., ::-1].copy()
        steps.append(lambda g: g[..., ::-1].copy())
    if t.shift_y or t.shift_x:
        x = _shift2d(x, t.shift_y, t.shift_x)
        sy, sx = t.shift_y, t.shift_x
        steps.append(lambda g: _shift2d(g, -sy, -sx))
    if t.brightness_shift != 0.0:
        x = x + np.asarray(t.brightness_shift, dtype=x.dtype)
        steps.append(lambda g: g)
    if t.saturation_scale != 1.0:
        gray = x.mean(axis=1, keepdims=True)
        s = t.saturation_scale
        x = (x - gray) * np.asarray(s, dtype=x.dtype) + gray

        def sat_bwd(g, s=s, nc=c):
            gm = g.mean(axis=1, keepdims=True)
            return g * s + gm * (1.0 - s)

        steps.append(sat_bwd)
    if t.contrast_scale != 1.0:
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        s = t.contrast_scale
        x = (x - mu) * np.asarray(s, dtype=x.dtype) + mu

        def con_bwd(g, s=s):
            gm = g.mean(axis=(1, 2, 3), keepdims=True)
            return g * s + gm * (1.0 - s)

        steps.append(con_bwd)
    if t.cut_size:
        mask = np.ones((h, w), dtype=x.dtype)
        half = t.cut_size // 2
        y0, y1 = max(t.cut_y - half, 0), min(t.cut_y + (t.cut_size - half), h)
        x0, x1 = max(t.cut_x - half, 0), min(t.cut_x + (t.cut_size - half), w)
        mask[y0:y1, x0:x1] = 0.0
        x = x * mask
        steps.append(lambda g: g * mask)

    z = x
    out = np.clip(z, 0.0, 1.0)
    # clip subgradient: pass-through strictly inside (0, 1), zero at the
    # saturated boundary (cutout regions land exactly on 0 and stay dark)
    passmask = (z > 0.0) & (z < 1.0)

    def vjp(gout: np.ndarray):
        g = np.asarray(gout) * passmask
        for bwd in reversed(steps):
            g = bwd(g)
        return g

    return out, vjp


def augment(images: np.ndarray, params: AugmentParams) -> np.ndarray:
    """One sampled transform applied to the whole batch; same seed gives
    bitwise-identical outputs across calls."""
    x = np.asarray(images)
    t = sample_transform(params, x.shape[-1])
    return apply_transform(x, t)
