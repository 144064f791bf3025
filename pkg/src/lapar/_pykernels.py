"""Pure numpy implementations of the hot kernels.

These are the fallback used when the compiled ``_ckernels`` extension is not
available. Both modules expose identical signatures; see ``lapar.kernels``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, pad, stride):
    """(N, C, H, W) -> (N, C*kh*kw, H'*W') with zero padding."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, C, Ho, Wo, kh, kw) -> (N, C, kh, kw, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw, pad, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back to (N, C, H, W)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def reflect_patches(img, k):
    """(H, W) -> (H*W, k*k) row-major neighbourhoods, reflect-101 border."""
    r = k // 2
    padded = np.pad(img, r, mode="reflect")
    win = sliding_window_view(padded, (k, k))
    return np.ascontiguousarray(win.reshape(img.shape[0] * img.shape[1], k * k))


def pixelwise_apply(patches, phi, dmat):
    """Per-pixel ``phi[i] . (dmat @ patches[i])``."""
    out = np.empty(patches.shape[0], dtype=np.result_type(patches, phi, dmat))
    step = 4096
    for lo in range(0, patches.shape[0], step):
        resp = patches[lo:lo + step] @ dmat.T
        out[lo:lo + step] = np.einsum("il,il->i", phi[lo:lo + step], resp)
    return out
