"""Assembling per-pixel filters from dictionary coefficients and applying them.

Two interchangeable execution paths compute the same prediction
``y_i = phi_i . D . B_i``:

* ``pixelwise`` assembles each pixel's filter ``phi_i D`` and dots it with the
  pixel's patch row. It is the reference path and works on a PatchMatrix.
* ``basisconv`` filters the whole image with every basis once (reflect-101
  border) and then takes the per-pixel dot product of the L responses with
  ``phi_i``. This is the production path and the one used in training.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lapar import kernels
from lapar.dictionary import Dictionary
from lapar.imaging import Image, PatchMatrix, extract_patches


@dataclass
class CoefficientMap:
    """Per-pixel coefficient vectors, stored planar as (L, H, W)."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        if c.ndim != 3:
            raise ValueError(f"coefficient map must be (L, H, W), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficient map contains non-finite values")
        self.coeffs = c

    @property
    def L(self) -> int:
        return self.coeffs.shape[0]

    @property
    def height(self) -> int:
        return self.coeffs.shape[1]

    @property
    def width(self) -> int:
        return self.coeffs.shape[2]

    def rows(self) -> np.ndarray:
        """(H*W, L) view: one row per pixel in raster order."""
        return self.coeffs.reshape(self.L, -1).T


def assemble_filter(phi_i, d: Dictionary) -> np.ndarray:
    phi_i = np.asarray(phi_i, dtype=np.float64)
    if phi_i.shape != (d.L,):
        raise ValueError(f"coefficient vector has length {phi_i.shape} but dictionary has L={d.L}")
    return (phi_i @ d.as_matrix).reshape(d.k, d.k)


def assemble_filters(phi: CoefficientMap, d: Dictionary) -> np.ndarray:
    """All per-pixel filters, (H*W, k*k)."""
    _check_L(phi, d)
    return phi.rows() @ d.as_matrix


def _check_L(phi: CoefficientMap, d: Dictionary):
    if phi.L != d.L:
        raise ValueError(f"coefficient map has L={phi.L} but dictionary has L={d.L}")


def predict_pixelwise(patches: PatchMatrix, phi: CoefficientMap, d: Dictionary) -> np.ndarray:
    """(H, W) prediction from a patch matrix; not clamped."""
    _check_L(phi, d)
    if patches.k != d.k:
        raise ValueError(f"patch size k={patches.k} does not match dictionary k={d.k}")
    if (patches.height, patches.width) != (phi.height, phi.width):
        raise ValueError(f"patch matrix is {patches.height}x{patches.width} but coefficients are "
                         f"{phi.height}x{phi.width}")
    dtype = np.result_type(patches.data, phi.coeffs)
    out = kernels.pixelwise_apply(patches.data.astype(dtype, copy=False),
                                  np.ascontiguousarray(phi.rows(), dtype=dtype),
                                  d.as_matrix.astype(dtype))
    return out.reshape(patches.height, patches.width)


def basis_responses(planes: np.ndarray, d: Dictionary) -> np.ndarray:
    """Filter (N, H, W) planes with every basis -> (N, L, H, W)."""
    planes = np.asarray(planes)
    bank = d.bases.astype(planes.dtype if planes.dtype.kind == "f" else np.float64)
    return kernels.filter_bank(np.ascontiguousarray(planes), bank)


def predict_basisconv(upsampled, phi: CoefficientMap, d: Dictionary,
                      padding: str = "reflect101") -> np.ndarray:
    """(H, W) prediction from the single-channel image the patches come from."""
    _check_L(phi, d)
    if padding != "reflect101":
        raise ValueError(f"basisconv only supports reflect101 padding, got {padding!r}")
    px = upsampled.pixels if isinstance(upsampled, Image) else np.asarray(upsampled)
    if px.ndim == 3:
        if px.shape[0] != 1:
            raise ValueError("predict_basisconv works on one channel")
        px = px[0]
    if px.shape != (phi.height, phi.width):
        raise ValueError(f"image is {px.shape} but coefficients are {phi.height}x{phi.width}")
    dtype = np.result_type(px, phi.coeffs)
    resp = basis_responses(px.astype(dtype, copy=False)[None], d)[0]
    return np.einsum("lhw,lhw->hw", phi.coeffs.astype(dtype, copy=False), resp)


def predict_basisconv_from(patches: PatchMatrix, upsampled, phi: CoefficientMap, d: Dictionary):
    """basisconv guarded against a patch matrix built with another border mode."""
    if patches.padding != "reflect101":
        raise ValueError(f"patch matrix was built with {patches.padding!r} padding; "
                         f"basisconv uses reflect101")
    return predict_basisconv(upsampled, phi, d, padding=patches.padding)


def enhance(img: Image, phi: CoefficientMap, d: Dictionary, path: str = "basisconv",
            channels: str = "all", timings: Optional[dict] = None) -> Image:
    """Apply the pixel-adaptive filters to every channel (or only Y).

    ``channels="y"`` expects a YCbCr image and filters only its first plane.
    Elapsed seconds are added to ``timings[path]`` when a dict is given.
    """
    if path not in ("pixelwise", "basisconv"):
        raise ValueError(f"unknown path {path!r}")
    if channels not in ("all", "y"):
        raise ValueError(f"unknown channel mode {channels!r}")
    t0 = time.perf_counter()
    out = img.pixels.copy()
    idx = [0] if channels == "y" else range(img.channels)
    for c in idx:
        plane = img.pixels[c]
        if path == "pixelwise":
            out[c] = predict_pixelwise(extract_patches(plane, d.k), phi, d)
        else:
            out[c] = predict_basisconv(plane, phi, d)
    if timings is not None:
        timings[path] = timings.get(path, 0.0) + time.perf_counter() - t0
    return img.with_pixels(out)


def timing_report(timings: dict) -> str:
    return "\n".join(f"{k}\t{v * 1000:.3f} ms" for k, v in timings.items())
