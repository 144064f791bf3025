# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures mirror ``lapar._pykernels``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _reflect101(Py_ssize_t i, Py_ssize_t n) nogil:
    if n == 1:
        return 0
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * n - 2 - i
    return i


def _im2col(floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
            int kh, int kw, int pad, int stride, int ho, int wo):
    cdef Py_ssize_t n, c, i, j, oy, ox, iy, ix, row
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                for ox in range(wo):
                                    cols[n, row, oy * wo + ox] = 0
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= W:
                                    cols[n, row, oy * wo + ox] = 0
                                else:
                                    cols[n, row, oy * wo + ox] = x[n, c, iy, ix]


def im2col(x, int kh, int kw, int pad, int stride):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, pad, stride, ho, wo)
    return cols


def _col2im(floating[:, :, ::1] cols, floating[:, :, :, ::1] out,
            int kh, int kw, int pad, int stride, int ho, int wo):
    cdef Py_ssize_t n, c, i, j, oy, ox, iy, ix, row
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if ix >= 0 and ix < W:
                                    out[n, c, iy, ix] += cols[n, row, oy * wo + ox]


def col2im(cols, x_shape, int kh, int kw, int pad, int stride):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols.reshape(n, c * kh * kw, ho * wo), out, kh, kw, pad, stride, ho, wo)
    return out


def _reflect_patches(floating[:, ::1] img, floating[:, ::1] out, Py_ssize_t[::1] ry,
                     Py_ssize_t[::1] rx, int k):
    # ry[y + i] / rx[x + j] hold the reflected source row / column of tap (i, j)
    cdef Py_ssize_t y, x, i, j, sy, base
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1]
    with nogil:
        for y in range(H):
            for x in range(W):
                base = y * W + x
                for i in range(k):
                    sy = ry[y + i]
                    for j in range(k):
                        out[base, i * k + j] = img[sy, rx[x + j]]


def _reflect_table(Py_ssize_t n, int k):
    cdef Py_ssize_t r = k // 2, i
    table = np.empty(n + k - 1, dtype=np.intp)
    for i in range(n + k - 1):
        table[i] = _reflect101(i - r, n)
    return table


def reflect_patches(img, int k):
    img = np.ascontiguousarray(img)
    h, w = img.shape
    out = np.empty((h * w, k * k), dtype=img.dtype)
    _reflect_patches(img, out, _reflect_table(h, k), _reflect_table(w, k), k)
    return out


def _pixelwise_apply(floating[:, ::1] patches, floating[:, ::1] phi,
                     floating[:, ::1] dmat, floating[::1] out, floating[::1] filt):
    # assemble the pixel's filter F = phi_p D (contiguous, vectorizable), then F . B_p
    cdef Py_ssize_t p, l, t
    cdef Py_ssize_t P = patches.shape[0], T = patches.shape[1], L = phi.shape[1]
    cdef floating acc, c
    with nogil:
        for p in range(P):
            for t in range(T):
                filt[t] = 0
            for l in range(L):
                c = phi[p, l]
                for t in range(T):
                    filt[t] = filt[t] + c * dmat[l, t]
            acc = 0
            for t in range(T):
                acc = acc + filt[t] * patches[p, t]
            out[p] = acc


def pixelwise_apply(patches, phi, dmat):
    dtype = np.result_type(patches, phi, dmat)
    patches = np.ascontiguousarray(patches, dtype=dtype)
    phi = np.ascontiguousarray(phi, dtype=dtype)
    dmat = np.ascontiguousarray(dmat, dtype=dtype)
    out = np.empty(patches.shape[0], dtype=dtype)
    _pixelwise_apply(patches, phi, dmat, out, np.empty(patches.shape[1], dtype=dtype))
    return out
