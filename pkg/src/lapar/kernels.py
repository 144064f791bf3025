"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports cleanly; the
numpy implementations in ``_pykernels`` are the fallback. Set
``LAPAR_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from lapar import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("LAPAR_PURE_PYTHON"):
    try:
        from lapar import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        pass


def backends():
    """Available kernel modules keyed by name (for tests and benchmarks)."""
    found = {"python": _pykernels}
    try:
        from lapar import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous one."""
    global BACKEND, _impl, im2col, col2im, reflect_patches, pixelwise_apply
    found = backends()
    if name not in found:
        raise ValueError(f"backend {name!r} is not available (have {sorted(found)})")
    previous = BACKEND
    BACKEND, _impl = name, found[name]
    im2col = _impl.im2col
    col2im = _impl.col2im
    reflect_patches = _impl.reflect_patches
    pixelwise_apply = _impl.pixelwise_apply
    return previous


im2col = _impl.im2col
col2im = _impl.col2im
reflect_patches = _impl.reflect_patches
pixelwise_apply = _impl.pixelwise_apply


def filter_bank(imgs, bank, patch_fn=None):
    """Cross-correlate each (H, W) plane of ``imgs`` (N, H, W) with every
    filter of ``bank`` (L, k, k) under reflect-101 padding -> (N, L, H, W).

    Built as patch extraction followed by one GEMM per plane.
    """
    patch_fn = patch_fn or reflect_patches
    n, h, w = imgs.shape
    nb, k, _ = bank.shape
    dtype = np.result_type(imgs, bank)
    dmat = np.ascontiguousarray(bank.reshape(nb, k * k), dtype=dtype)
    out = np.empty((n, nb, h, w), dtype=dtype)
    for i in range(n):
        patches = patch_fn(np.ascontiguousarray(imgs[i], dtype=dtype), k)
        out[i] = (dmat @ patches.T).reshape(nb, h, w)
    return out
