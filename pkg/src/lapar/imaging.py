"""Images, bicubic resampling, synthetic degradations and patch matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.fft import dctn, idctn

from lapar import kernels
from lapar.dictionary import GaussianSpec, gaussian_kernel

COLORSPACES = ("RGB", "YCbCr", "Gray")


@dataclass
class Image:
    """Planar (channels, height, width) real image, nominally in [0, 1]."""

    pixels: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype.kind != "f":
            px = px.astype(np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or px.shape[0] not in (1, 3):
            raise ValueError(f"image pixels must be (1|3, H, W), got {px.shape}")
        if self.colorspace not in COLORSPACES:
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        if px.shape[0] == 1 and self.colorspace == "RGB":
            self.colorspace = "Gray"
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        self.pixels = px

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, px: np.ndarray) -> "Image":
        return replace(self, pixels=px)


@dataclass
class PatchMatrix:
    """One row per pixel holding its row-major k x k neighbourhood."""

    data: np.ndarray  # (H*W, k*k)
    height: int
    width: int
    k: int
    padding: str = "reflect101"

    @property
    def rows(self) -> int:
        return self.data.shape[0]


@dataclass
class DegradationSpec:
    """Which degradation to synthesise.

    ``task`` selects the active fields: ``sr`` uses ``scale`` and ``blur``,
    ``denoise`` uses ``noise_sigma`` (in [0, 1] units), ``deblock`` uses
    ``blocking_quality``.
    """

    task: str = "sr"
    scale: int = 2
    blur: Optional[GaussianSpec] = field(default=None)
    noise_sigma: float = 0.0
    blocking_quality: Optional[int] = None

    def __post_init__(self):
        if self.task not in ("sr", "denoise", "deblock"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task != "sr":
            self.scale = 1
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.task == "deblock" and self.blocking_quality is None:
            raise ValueError("deblock task needs blocking_quality")


def default_blur(scale: int) -> Optional[GaussianSpec]:
    """Isotropic Gaussian with sigma = 0.8 * scale / 2 (None for scale 1)."""
    if scale <= 1:
        return None
    s = 0.8 * scale / 2.0
    return GaussianSpec(1.0, 0.0, s, s)


# -- bicubic -----------------------------------------------------------------

def keys_cubic(t, a: float = -0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edge replicate."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in range(-1, 3):
        idx = base + off
        wgt = keys_cubic(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), wgt)
    return mat


def _as_scale(s) -> float:
    if isinstance(s, str):
        s = Fraction(s)
    s = float(s)
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return s


def resized_shape(h: int, w: int, s) -> tuple:
    s = _as_scale(s)
    return int(math.floor(h * s + 0.5)), int(math.floor(w * s + 0.5))


def bicubic_resize_array(px: np.ndarray, s, clamp: bool = True) -> np.ndarray:
    """Resize the trailing two axes of ``px`` by factor ``s``."""
    s = _as_scale(s)
    h, w = px.shape[-2:]
    ho, wo = resized_shape(h, w, s)
    if ho < 1 or wo < 1:
        raise ValueError(f"resizing {h}x{w} by {s} gives an empty image")
    if ho == h and wo == w and s == 1.0:
        out = px.astype(np.float64 if px.dtype == np.float64 else px.dtype, copy=True)
    else:
        my = _resize_matrix(h, ho, s).astype(px.dtype)
        mx = _resize_matrix(w, wo, s).astype(px.dtype)
        out = np.matmul(np.matmul(my, px), mx.T)
    return np.clip(out, 0.0, 1.0) if clamp else out


def bicubic_resize(img: Image, s, clamp: bool = True) -> Image:
    return img.with_pixels(bicubic_resize_array(img.pixels, s, clamp=clamp))


# -- degradations ------------------------------------------------------------

def blur_array(px: np.ndarray, spec: GaussianSpec, k: Optional[int] = None) -> np.ndarray:
    """Gaussian blur of the trailing two axes, reflect-101 border."""
    if k is None:
        sig = spec.gamma * max(spec.sigma1, spec.sigma2)
        k = 2 * int(math.ceil(3 * sig)) + 1
    kern = gaussian_kernel(spec, k)
    lead = px.shape[:-2]
    planes = px.reshape((-1,) + px.shape[-2:])
    out = kernels.filter_bank(np.ascontiguousarray(planes, dtype=np.float64), kern[None])[:, 0]
    return out.reshape(lead + px.shape[-2:])


def degrade(hr: Image, spec: DegradationSpec, seed: int = 0) -> Image:
    px = hr.pixels
    if spec.task == "sr":
        s = spec.scale
        if hr.height % s or hr.width % s:
            raise ValueError(
                f"HR size {hr.height}x{hr.width} is not divisible by scale {s}; "
                f"crop to {hr.height - hr.height % s}x{hr.width - hr.width % s}")
        if spec.blur is not None:
            px = blur_array(px, spec.blur)
        return hr.with_pixels(np.ascontiguousarray(px[:, ::s, ::s]))
    if spec.task == "denoise":
        if spec.noise_sigma == 0:
            return hr.with_pixels(px.copy())
        rng = np.random.default_rng(seed)
        noisy = px + rng.normal(0.0, spec.noise_sigma, size=px.shape)
        return hr.with_pixels(np.clip(noisy, 0.0, 1.0))
    return simulate_blocking(hr, spec.blocking_quality, seed)


JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the IJG quality convention."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1, 255)


def blocking_plane(plane: np.ndarray, quality: int) -> np.ndarray:
    """8x8 DCT -> quantise -> IDCT on one plane, output on the 8-bit grid."""
    q = quant_table(quality)
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    work = np.pad(plane * 255.0, ((0, ph), (0, pw)), mode="edge") - 128.0
    blocks = work.reshape(work.shape[0] // 8, 8, work.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(work.shape)[:h, :w] + 128.0
    return np.clip(np.floor(rec + 0.5), 0.0, 255.0) / 255.0


def simulate_blocking(img: Image, quality: int, seed: int = 0) -> Image:
    """JPEG-like blocking artefacts, applied to each plane independently.

    Deterministic; ``seed`` is accepted for interface symmetry.
    """
    return img.with_pixels(np.stack([blocking_plane(p, quality) for p in img.pixels]))


# -- patches -----------------------------------------------------------------

def extract_patches(img: Union[Image, np.ndarray], k: int = 5) -> PatchMatrix:
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    if px.ndim == 3:
        if px.shape[0] != 1:
            raise ValueError("extract_patches works on one channel; split the image first")
        px = px[0]
    if k < 1 or k % 2 == 0:
        raise ValueError(f"k must be odd, got {k}")
    data = kernels.reflect_patches(np.ascontiguousarray(px), k)
    return PatchMatrix(data, px.shape[0], px.shape[1], k)


# -- I/O ---------------------------------------------------------------------

def quantize8(px: np.ndarray) -> np.ndarray:
    """[0, 1] reals to uint8 with round-half-away-from-zero."""
    return np.floor(np.clip(px, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path, gray: bool = False) -> Image:
    """Read PNG / PPM / PGM (or anything Pillow decodes, e.g. JPEG)."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if gray or im.mode in ("L", "I", "I;16", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[None] / 255.0
            return Image(arr, "Gray")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
        return Image(arr, "RGB")


def save_image(img: Image, path) -> None:
    from PIL import Image as PILImage

    path = Path(path)
    u8 = quantize8(img.pixels)
    if img.channels == 1:
        pil = PILImage.fromarray(u8[0])
    else:
        pil = PILImage.fromarray(np.ascontiguousarray(u8.transpose(1, 2, 0)))
    fmt = None
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        fmt = "PPM"
    pil.save(path, format=fmt)
