"""Pure-numpy convolution kernel triad (im2col based).

Shapes follow the usual NCHW convention:
    x  : (B, Cin, H, W)
    w  : (Cout, Cin, kh, kw)
    y  : (B, Cout, Ho, Wo)   with Ho = (H + 2p - kh)//s + 1

The three kernels are mutually adjoint: ``conv2d_input_grad`` is the
adjoint of ``conv2d_forward`` in x (a transposed convolution), and
``conv2d_weight_grad`` is the adjoint in w.
"""

from __future__ import annotations

import numpy as np


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Return the sliding windows view (B, Cin, Ho, Wo, kh, kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True)


def conv2d_weight_grad(
    x: np.ndarray, dy: np.ndarray, w_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    win = _windows(x, w_shape[2], w_shape[3], stride, pad)
    return np.einsum("bchwij,bohw->ocij", win, dy, optimize=True)


def conv2d_input_grad(
    dy: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, pad: int
) -> np.ndarray:
    b, _, h, wd = x_shape
    _, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros((b, w.shape[1], h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    # one fused product (B, Cin, Ho, Wo, kh, kw), scattered by kernel offset
    g = np.einsum("bohw,ocij->bchwij", dy, w, optimize=True)
    for ki in range(kh):
        rows = slice(ki, ki + stride * (ho - 1) + 1, stride)
        for kj in range(kw):
            cols = slice(kj, kj + stride * (wo - 1) + 1, stride)
            dxp[:, :, rows, cols] += g[:, :, :, :, ki, kj]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + wd]
    return dxp
