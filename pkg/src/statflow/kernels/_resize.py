"""Bilinear resampling as small dense interpolation matrices.

Resizing an (…, h, h) tensor to (…, r, r) is A @ x @ A.T with A the 1-D
half-pixel interpolation matrix, so the exact adjoint (needed for
backprop through pyramid upsampling) is A.T @ g @ A. The matrices are
tiny at the resolutions this package works at, so both backends share
this module and the work lands in BLAS either way.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def interp_matrix(src: int, dst: int) -> np.ndarray:
    """1-D bilinear interpolation matrix of shape (dst, src), float64.

    Uses the half-pixel convention: output sample i reads from source
    coordinate (i + 0.5) * src / dst - 0.5, clamped to the valid range.
    """
    if src < 1 or dst < 1:
        raise ValueError("resolutions must be positive")
    a = np.zeros((dst, src), dtype=np.float64)
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    t = pos - i0
    rows = np.arange(dst)
    np.add.at(a, (rows, i0), 1.0 - t)
    np.add.at(a, (rows, i1), t)
    return a


def resize_bilinear(x: np.ndarray, out_res: int) -> np.ndarray:
    """Resize the trailing two (square) axes of x to out_res."""
    src = x.shape[-1]
    if x.shape[-2] != src:
        raise ValueError("resize_bilinear expects square trailing axes")
    if src == out_res:
        return x.copy()
    a = interp_matrix(src, out_res).astype(x.dtype)
    return np.matmul(a, np.matmul(x, a.T))


def resize_bilinear_adjoint(gy: np.ndarray, in_res: int) -> np.ndarray:
    """Adjoint of resize_bilinear: maps output-space gradients back to
    an input of resolution in_res."""
    dst = gy.shape[-1]
    if gy.shape[-2] != dst:
        raise ValueError("resize_bilinear_adjoint expects square trailing axes")
    if dst == in_res:
        return gy.copy()
    a = interp_matrix(in_res, dst).astype(gy.dtype)
    return np.matmul(a.T, np.matmul(gy, a))
