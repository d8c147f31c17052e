"""Hot loops: im2col/col2im, the naive convolution reference and a
fixed-order matrix product.

Each kernel exists twice, as a numba ``@njit`` function and as a pure-numpy
function with identical summation order. Set ``WSNORM_DISABLE_NUMBA=1``
before import to force the numpy path (numba missing has the same effect).
"""

from __future__ import annotations

import os
from typing import Callable, NamedTuple

import numpy as np

_DISABLED = os.environ.get("WSNORM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


class Kernels(NamedTuple):
    im2col: Callable
    col2im: Callable
    matmul_ordered: Callable
    conv2d_naive: Callable


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def im2col_numpy(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * ho
        for xx in range(kw):
            x_max = xx + stride * wo
            col[:, :, y, xx] = img[:, :, y:y_max:stride, xx:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * kh * kw)


def col2im_numpy(col, shape, kh, kw, stride, pad):
    b, c, h, w = shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    col = col.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((b, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=col.dtype)
    for y in range(kh):
        y_max = y + stride * ho
        for xx in range(kw):
            x_max = xx + stride * wo
            img[:, :, y:y_max:stride, xx:x_max:stride] += col[:, :, y, xx]
    return img[:, :, pad:pad + h, pad:pad + w].copy()


def matmul_ordered_numpy(a, b):
    # acc[r, o] = ((0 + a[r,0]b[0,o]) + a[r,1]b[1,o]) + ...
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def conv2d_naive_numpy(x, w, stride, pad):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(wd, kw, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bsz, cout, ho, wo), dtype=np.result_type(x, w))
    for b in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += img[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _im2col_numba(x, kh, kw, stride, pad):
        b, c, h, w = x.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        col = np.zeros((b * ho * wo, c * kh * kw), dtype=x.dtype)
        for n in range(b):
            for i in range(ho):
                for j in range(wo):
                    row = (n * ho + i) * wo + j
                    for ch in range(c):
                        for u in range(kh):
                            yy = i * stride + u - pad
                            if yy < 0 or yy >= h:
                                continue
                            for v in range(kw):
                                xx = j * stride + v - pad
                                if xx < 0 or xx >= w:
                                    continue
                                col[row, (ch * kh + u) * kw + v] = x[n, ch, yy, xx]
        return col

    def im2col_numba(x, kh, kw, stride, pad):
        return _im2col_numba(np.ascontiguousarray(x), kh, kw, stride, pad)

    @_jit
    def _col2im_numba(col, b, c, h, w, kh, kw, stride, pad):
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        img = np.zeros((b, c, h, w), dtype=col.dtype)
        # kernel offsets outermost: each pixel sums its terms in the same
        # order as the numpy path
        for n in range(b):
            for ch in range(c):
                for u in range(kh):
                    for v in range(kw):
                        k = (ch * kh + u) * kw + v
                        for i in range(ho):
                            yy = i * stride + u - pad
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(wo):
                                xx = j * stride + v - pad
                                if xx < 0 or xx >= w:
                                    continue
                                img[n, ch, yy, xx] += col[(n * ho + i) * wo + j, k]
        return img

    def col2im_numba(col, shape, kh, kw, stride, pad):
        b, c, h, w = shape
        return _col2im_numba(np.ascontiguousarray(col), b, c, h, w, kh, kw, stride, pad)

    @_jit
    def _matmul_ordered_numba(a, b, out):
        n, m = a.shape
        p = b.shape[1]
        for r in range(n):
            for o in range(p):
                acc = 0.0
                for k in range(m):
                    acc += a[r, k] * b[k, o]
                out[r, o] = acc
        return out

    def matmul_ordered_numba(a, b):
        out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
        return _matmul_ordered_numba(np.ascontiguousarray(a), np.ascontiguousarray(b), out)

    @_jit
    def _conv2d_naive_numba(img, w, stride, out):
        bsz, cout, ho, wo = out.shape
        cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        for b in range(bsz):
            for o in range(cout):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for c in range(cin):
                            for u in range(kh):
                                for v in range(kw):
                                    acc += img[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                        out[b, o, i, j] = acc
        return out

    def conv2d_naive_numba(x, w, stride, pad):
        bsz, _, h, wd = x.shape
        cout, _, kh, kw = w.shape
        img = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))))
        out = np.empty((bsz, cout, _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)),
                       dtype=np.result_type(x, w))
        return _conv2d_naive_numba(img, np.ascontiguousarray(w), stride, out)

    BACKENDS = {
        "numpy": Kernels(im2col_numpy, col2im_numpy, matmul_ordered_numpy, conv2d_naive_numpy),
        "numba": Kernels(im2col_numba, col2im_numba, matmul_ordered_numba, conv2d_naive_numba),
    }
else:  # pragma: no cover
    BACKENDS = {
        "numpy": Kernels(im2col_numpy, col2im_numpy, matmul_ordered_numpy, conv2d_naive_numpy),
    }

BACKEND = "numpy" if (_DISABLED or numba is None) else "numba"

im2col, col2im, matmul_ordered, conv2d_naive = BACKENDS[BACKEND]


def uses_numba() -> bool:
    return BACKEND == "numba"
