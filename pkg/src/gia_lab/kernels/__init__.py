"""Convolution kernel backend selection.

The compiled Cython kernels are preferred when the extension built; the
pure-numpy im2col kernels are the fallback. Set ``GIA_LAB_FORCE_FALLBACK=1``
to force the numpy path (used by the backend-equivalence tests and the
kernel benchmark).
"""

from __future__ import annotations

import os

import numpy as np

from . import _conv_numpy

BACKEND = "numpy"
_impl = _conv_numpy

if os.environ.get("GIA_LAB_FORCE_FALLBACK", "") != "1":
    try:
        from . import _conv_cy

        BACKEND = "cython"
        _impl = _conv_cy
    except ImportError:
        pass


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, stride=1, pad=0):
    return _impl.conv2d_forward(_c(x), _c(w), stride, pad)


def conv2d_weight_grad(x, dy, w_shape, stride=1, pad=0):
    return _impl.conv2d_weight_grad(_c(x), _c(dy), tuple(w_shape), stride, pad)


def conv2d_input_grad(dy, w, x_shape, stride=1, pad=0):
    return _impl.conv2d_input_grad(_c(dy), _c(w), tuple(x_shape), stride, pad)
