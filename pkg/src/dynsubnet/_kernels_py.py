"""Pure numpy im2col / col2im, used when the compiled core is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, K, K) -> (N, Ho, Wo, C, K, K)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, n, c, h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    d = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += d[..., ki, kj]
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx)
