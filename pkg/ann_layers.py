"""
CCMForge Network Layers

Forward and backward kernels for the reconstruction network, operating on a
batch laid out as (items, channels, height, width). Convolutions are
stride-1 and zero-padded to preserve spatial size, and run as one matrix
product per layer over a contiguous im2col buffer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> contiguous (N, C*k*k, H*W) patch matrix, zero-padded by k // 2."""
    n, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x).reshape(n, c, h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * w)


def col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back onto (N, C, H, W)."""
    n = cols.shape[0]
    if k == 1:
        return cols.reshape(n, c, h, w)
    p = k // 2
    patches = cols.reshape(n, c, k, k, h, w)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += patches[:, :, i, j]
    return dxp[:, :, p:p + h, p:p + w]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Same-size cross-correlation.

    x: (N, C_in, H, W); w: (C_out, C_in, k, k); b: (C_out,).
    Returns the output (N, C_out, H, W) and the im2col buffer backward needs.
    """
    n, _, h, width = x.shape
    c_out, k = w.shape[0], w.shape[-1]
    cols = im2col(x, k)
    out = np.matmul(w.reshape(c_out, -1), cols)
    out += b[:, None]
    return out.reshape(n, c_out, h, width), cols


def conv2d_backward(
    dout: np.ndarray, cols: np.ndarray, w: np.ndarray, *, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) for conv2d_forward; dx is None when not needed."""
    n, c_out, h, width = dout.shape
    c_in, k = w.shape[1], w.shape[-1]
    d = dout.reshape(n, c_out, h * width)

    dw = np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    dcols = np.matmul(w.reshape(c_out, -1).T, d)
    return col2im(dcols, c_in, h, width, k), dw, db


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def relu_backward(da: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, da, 0)


def avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
