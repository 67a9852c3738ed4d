"""Pure-numpy kernel implementations (fallback backend).

Convolutions are lowered to im2col + BLAS matmul via stride tricks; the
numba backend replaces the gather/scatter loops but keeps identical
numerics up to float rounding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold same-padded KxK patches into rows of shape (B*H*W, Ci*K*K)."""
    b, ci, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B,Ci,H,W,K,K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * h * w, ci * k * k)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1, same-padded 2-D convolution.

    x: (B, Ci, H, W), w: (Co, Ci, K, K) with odd K, b: (Co,).
    Returns (B, Co, H, W) in the dtype of x.
    """
    bb, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    cols = _im2col(x, k)
    y = cols @ w.reshape(co, -1).T
    y += b
    return np.ascontiguousarray(y.reshape(bb, h, ww, co).transpose(0, 3, 1, 2))


def conv2d_input_grad(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input: convolve gy with the
    channel-swapped, spatially flipped kernel."""
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zeros = np.zeros(wt.shape[0], dtype=gy.dtype)
    return conv2d(gy, wt, zeros)


def conv2d_weight_grad(x: np.ndarray, gy: np.ndarray, k: int):
    """Gradients of conv2d w.r.t. weights and bias.

    Returns (dw, db) with dw: (Co, Ci, K, K), db: (Co,).
    """
    bb, ci, h, ww = x.shape
    co = gy.shape[1]
    cols = _im2col(x, k)
    gmat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(bb * h * ww, co)
    dw = (gmat.T @ cols).reshape(co, ci, k, k)
    db = gy.sum(axis=(0, 2, 3))
    return dw, db


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(gy: np.ndarray) -> np.ndarray:
    """Adjoint of avgpool2: spread each gradient over its 2x2 window."""
    g = gy.repeat(2, axis=2).repeat(2, axis=3)
    g = g * np.asarray(0.25, dtype=gy.dtype)
    return g
