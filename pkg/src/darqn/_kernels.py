"""Hot convolution kernels (patch extraction and its adjoint).

Two implementations are kept side by side: numba ``@njit`` loops and a pure
numpy path. ``DARQN_NUMBA=0`` in the environment forces the numpy path; the
default uses numba when it imports cleanly. Both paths accumulate in the same
order, so results agree bit-for-bit in practice and to 1e-12 by test.
"""
import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _env_wants_numba():
    flag = os.environ.get("DARQN_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _env_wants_numba()


def im2col_numpy(x, k, stride):
    """[N,C,H,W] -> [N, OH*OW, C*k*k] patch matrix (location-major rows)."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * k * k)


def col2im_numpy(cols, shape, k, stride):
    """Adjoint of :func:`im2col_numpy`; overlapping patches sum."""
    n, c, h, w = shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    patches = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return out


if HAS_NUMBA:
    @njit(cache=True)
    def _im2col_nb(x, k, stride):
        n, c, h, w = x.shape
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        out = np.empty((n, oh * ow, c * k * k))
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    row = p * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                out[b, row, col] = x[b, ch, p * stride + i, q * stride + j]
                                col += 1
        return out

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride):
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        out = np.zeros((n, c, h, w))
        # (i, j) outermost to match the numpy path's accumulation order
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for ch in range(c):
                        col = (ch * k + i) * k + j
                        for p in range(oh):
                            for q in range(ow):
                                out[b, ch, p * stride + i, q * stride + j] += cols[b, p * ow + q, col]
        return out

    def im2col_numba(x, k, stride):
        return _im2col_nb(np.ascontiguousarray(x, dtype=np.float64), k, stride)

    def col2im_numba(cols, shape, k, stride):
        n, c, h, w = shape
        return _col2im_nb(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, k, stride)
else:  # pragma: no cover
    im2col_numba = im2col_numpy
    col2im_numba = col2im_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"


def im2col(x, k, stride):
    if USE_NUMBA:
        return im2col_numba(x, k, stride)
    return im2col_numpy(x, k, stride)


def col2im(cols, shape, k, stride):
    if USE_NUMBA:
        return col2im_numba(cols, shape, k, stride)
    return col2im_numpy(cols, shape, k, stride)
