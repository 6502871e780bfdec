"""Kernel backend selection.

The compiled extension is used when it imports; set ``ATNLAB_PURE=1`` to force
the numpy fallback.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("ATNLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _c(x):
    return np.ascontiguousarray(x)


def im2col(x, k, stride, pad):
    return _impl.im2col(_c(x), k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    return _impl.col2im(_c(cols), tuple(shape), k, stride, pad)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_c(x))


def maxpool2_backward(g, arg, shape):
    return _impl.maxpool2_backward(_c(g), _c(arg), tuple(shape))
