"""Inference pipeline: cheap upsample -> coefficients -> adaptive filtering."""
from __future__ import annotations

import time
from typing import Optional

import numpy as np

from lapar import net
from lapar.assembly import CoefficientMap, enhance
from lapar.dictionary import Dictionary
from lapar.imaging import Image, bicubic_resize


def upsample_for(img: Image, scale: int) -> Image:
    """The image the filters are applied to: bicubic for SR, the input otherwise."""
    return bicubic_resize(img, scale) if scale > 1 else img.with_pixels(img.pixels.copy())


def model_input(img: Image, in_channels: int) -> np.ndarray:
    px = img.pixels
    if in_channels == px.shape[0]:
        return px[None]
    if in_channels == 1:
        from lapar.metrics import luma

        return luma(img)[0][None, None]
    return np.repeat(px, 3, axis=0)[None]


def check_compatible(model: net.ModelState, d: Dictionary) -> None:
    if model.config.L != d.L or model.config.k != d.k:
        raise ValueError(f"model expects L={model.config.L}, k={model.config.k} but dictionary has "
                         f"L={d.L}, k={d.k}")


def coefficients(model: net.ModelState, img: Image) -> CoefficientMap:
    phi = net.forward(model, model_input(img, model.config.in_channels))
    return CoefficientMap(phi.data[0])


def restore(model: net.ModelState, d: Dictionary, img: Image, path: str = "basisconv",
            timings: Optional[dict] = None, dtype=None) -> Image:
    """Run the full pipeline on one image; stage timings land in ``timings``."""
    check_compatible(model, d)
    if dtype is not None:
        model = model.astype(dtype)
        img = img.with_pixels(img.pixels.astype(dtype))
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    up = upsample_for(img, model.config.scale)
    t1 = time.perf_counter()
    phi = coefficients(model, img)
    t2 = time.perf_counter()
    out = enhance(up, phi, d, path=path)
    t3 = time.perf_counter()
    timings.update({"upsample": t1 - t0, "coefficients": t2 - t1, f"filter[{path}]": t3 - t2})
    return out
