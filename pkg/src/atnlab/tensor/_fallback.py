"""Pure-numpy versions of the convolution and pooling kernels.

These mirror ``_ckernels.pyx`` one-for-one, including the accumulation order
in :func:`col2im`, so both backends produce bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    """Unfold ``x`` of shape (B, C, H, W) into rows of receptive fields.

    Returns an array of shape (B * Ho * Wo, C * k * k).
    """
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c * k * k
    )


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add rows back onto an image batch."""
    b, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(b, ho, wo, c, k, k)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped.

    Returns the pooled batch and the flat window offset (0..3) of each max,
    first occurrence winning on ties.
    """
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, : 2 * ho, : 2 * wo].reshape(b, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(g, arg, shape):
    b, c, h, w = shape
    ho, wo = g.shape[2], g.shape[3]
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    full = (onehot * g[..., None]).reshape(b, c, ho, wo, 2, 2)
    full = full.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
    out = np.zeros(shape, dtype=g.dtype)
    out[:, :, : 2 * ho, : 2 * wo] = full
    return out
