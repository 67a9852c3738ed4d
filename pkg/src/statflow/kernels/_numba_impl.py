"""Numba-accelerated kernel implementations (default backend).

The patch gather/scatter loops are @njit-compiled (cached to disk); the
dense contractions still go through BLAS, which is where they belong.
Numerics must match _numpy_impl within float rounding.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col_nb(xp, k, h, w, cols):
    b = xp.shape[0]
    ci = xp.shape[1]
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                row = (bi * h + i) * w + j
                col = 0
                for c in range(ci):
                    for ki in range(k):
                        for kj in range(k):
                            cols[row, col] = xp[bi, c, i + ki, j + kj]
                            col += 1


@njit(cache=True)
def _pack_y(yflat, b, co, h, w, out):
    # yflat rows are (b, i, j) with co columns; out is (B, Co, H, W)
    for bi in range(b):
        for c in range(co):
            for i in range(h):
                for j in range(w):
                    out[bi, c, i, j] = yflat[(bi * h + i) * w + j, c]


@njit(cache=True)
def _avgpool2_nb(x, out):
    b, c, ho, wo = out.shape
    for bi in range(b):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[bi, ci, i, j] = (
                        x[bi, ci, 2 * i, 2 * j]
                        + x[bi, ci, 2 * i, 2 * j + 1]
                        + x[bi, ci, 2 * i + 1, 2 * j]
                        + x[bi, ci, 2 * i + 1, 2 * j + 1]
                    ) * 0.25


@njit(cache=True)
def _avgpool2_bwd_nb(gy, out):
    b, c, ho, wo = gy.shape
    for bi in range(b):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    g = gy[bi, ci, i, j] * 0.25
                    out[bi, ci, 2 * i, 2 * j] = g
                    out[bi, ci, 2 * i, 2 * j + 1] = g
                    out[bi, ci, 2 * i + 1, 2 * j] = g
                    out[bi, ci, 2 * i + 1, 2 * j + 1] = g


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, ci, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((b * h * w, ci * k * k), dtype=x.dtype)
    _im2col_nb(xp, k, h, w, cols)
    return cols


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1, same-padded 2-D convolution (see _numpy_impl.conv2d)."""
    bb, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    cols = _im2col(x, k)
    yflat = cols @ w.reshape(co, -1).T
    yflat += b
    out = np.empty((bb, co, h, ww), dtype=x.dtype)
    _pack_y(yflat, bb, co, h, ww, out)
    return out


def conv2d_input_grad(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zeros = np.zeros(wt.shape[0], dtype=gy.dtype)
    return conv2d(gy, wt, zeros)


def conv2d_weight_grad(x: np.ndarray, gy: np.ndarray, k: int):
    bb, ci, h, ww = x.shape
    co = gy.shape[1]
    cols = _im2col(x, k)
    gmat = np.empty((bb * h * ww, co), dtype=gy.dtype)
    _pack_g(gy, bb, co, h, ww, gmat)
    dw = (gmat.T @ cols).reshape(co, ci, k, k)
    db = gy.sum(axis=(0, 2, 3))
    return dw, db


@njit(cache=True)
def _pack_g(gy, b, co, h, w, gmat):
    for bi in range(b):
        for c in range(co):
            for i in range(h):
                for j in range(w):
                    gmat[(bi * h + i) * w + j, c] = gy[bi, c, i, j]


def avgpool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
    _avgpool2_nb(x, out)
    return out


def avgpool2_backward(gy: np.ndarray) -> np.ndarray:
    b, c, h, w = gy.shape
    out = np.empty((b, c, 2 * h, 2 * w), dtype=gy.dtype)
    _avgpool2_bwd_nb(gy, out)
    return out
