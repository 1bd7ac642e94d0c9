"""Numpy fallback for the convolution kernels.

Same contract as the compiled extension: stride-1 correlation with zero
"same" padding, channel-last layout. Forward and the two backward passes are
expressed as tensordot contractions over sliding-window views; batches are
chunked to bound the size of the materialized window tensor.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_CHUNK = 8  # batch rows per tensordot call


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(b, H, W, Cin, kh, kw) sliding windows over the zero-padded input."""
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))


def conv2d_forward(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    kh, kw, c_in, c_out = kernels.shape
    b, h, w, _ = x.shape
    out = np.empty((b, h, w, c_out), dtype=x.dtype)
    for lo in range(0, b, _CHUNK):
        sw = _windows(x[lo:lo + _CHUNK], kh, kw)
        out[lo:lo + _CHUNK] = np.tensordot(sw, kernels, axes=([4, 5, 3], [0, 1, 2]))
    return out


def conv2d_backward_input(grad_out: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    # full correlation with the spatially flipped, channel-transposed kernel
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2)
    return conv2d_forward(grad_out, np.ascontiguousarray(flipped))


def conv2d_backward_kernels(x: np.ndarray, grad_out: np.ndarray,
                            kh: int, kw: int) -> np.ndarray:
    c_in = x.shape[3]
    c_out = grad_out.shape[3]
    grad_k = np.zeros((c_in, kh, kw, c_out), dtype=x.dtype)
    for lo in range(0, x.shape[0], _CHUNK):
        sw = _windows(x[lo:lo + _CHUNK], kh, kw)
        grad_k += np.tensordot(sw, grad_out[lo:lo + _CHUNK], axes=([0, 1, 2], [0, 1, 2]))
    return np.ascontiguousarray(grad_k.transpose(1, 2, 0, 3))
