"""Hot data-movement kernels with a compiled backend and a numpy fallback.

The compiled module ``vluu._kernels`` is used when it was built and
``VLUU_PURE_PYTHON`` is not set. Both backends are bit-identical; the choice
only affects speed. All arrays are NHWC.
"""

from __future__ import annotations

import os

import numpy as np


def _im2col3x3(x, stride):
    n, h, w, c = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, ho, wo, 3, 3, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + stride * (ho - 1) + 1:stride,
                                          kj:kj + stride * (wo - 1) + 1:stride, :]
    return cols


def _col2im3x3(cols, h, w, stride):
    n, ho, wo = cols.shape[:3]
    c = cols.shape[5]
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, ki, kj, :]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1])


def _maxpool2_forward(x):
    a = x[:, 0::2, 0::2]
    b = x[:, 0::2, 1::2]
    c = x[:, 1::2, 0::2]
    d = x[:, 1::2, 1::2]
    best = a.copy()
    arg = np.zeros(best.shape, dtype=np.uint8)
    # strict ">" keeps the first maximum, like the compiled kernel
    for idx, v in ((1, b), (2, c), (3, d)):
        hit = v > best
        best[hit] = v[hit]
        arg[hit] = idx
    return best, arg


def _maxpool2_backward(dy, arg):
    n, h, w, c = dy.shape
    dx = np.zeros((n, 2 * h, 2 * w, c), dtype=dy.dtype)
    dx[:, 0::2, 0::2] = np.where(arg == 0, dy, 0)
    dx[:, 0::2, 1::2] = np.where(arg == 1, dy, 0)
    dx[:, 1::2, 0::2] = np.where(arg == 2, dy, 0)
    dx[:, 1::2, 1::2] = np.where(arg == 3, dy, 0)
    return dx


def _upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_backward(dy):
    return np.ascontiguousarray(
        ((dy[:, 0::2, 0::2] + dy[:, 0::2, 1::2]) + dy[:, 1::2, 0::2]) + dy[:, 1::2, 1::2]
    )


PURE = {
    "im2col3x3": _im2col3x3,
    "col2im3x3": _col2im3x3,
    "maxpool2_forward": _maxpool2_forward,
    "maxpool2_backward": _maxpool2_backward,
    "upsample2_forward": _upsample2_forward,
    "upsample2_backward": _upsample2_backward,
}

try:
    from vluu import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

COMPILED = None
if _compiled is not None:
    COMPILED = {name: getattr(_compiled, name) for name in PURE}

if COMPILED is not None and not os.environ.get("VLUU_PURE_PYTHON"):
    BACKEND = "compiled"
    _active = COMPILED
else:
    BACKEND = "python"
    _active = PURE


def _c(a):
    return np.ascontiguousarray(a)


def im2col3x3(x, stride=1):
    """(N,H,W,C) -> (N,Ho,Wo,3,3,C) patches of a 3x3, padding-1 convolution."""
    return _active["im2col3x3"](_c(x), stride)


def col2im3x3(cols, h, w, stride=1):
    """Adjoint of :func:`im2col3x3`; scatters patch gradients back to (N,H,W,C)."""
    return _active["col2im3x3"](_c(cols), h, w, stride)


def maxpool2_forward(x):
    return _active["maxpool2_forward"](_c(x))


def maxpool2_backward(dy, arg):
    return _active["maxpool2_backward"](_c(dy), _c(arg))


def upsample2_forward(x):
    return _active["upsample2_forward"](_c(x))


def upsample2_backward(dy):
    return _active["upsample2_backward"](_c(dy))
