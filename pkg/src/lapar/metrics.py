"""PSNR / SSIM on the luma channel, colour conversion and the evaluation table."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import convolve2d

from lapar.imaging import Image

PSNR_CAP = 100.0

# BT.601, full-range RGB in [0, 1] -> studio-swing YCbCr in [0, 1] units.
_YCC_MAT = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
]) / 255.0
_YCC_OFF = np.array([16.0, 128.0, 128.0]) / 255.0
_YCC_INV = np.linalg.inv(_YCC_MAT)


@dataclass
class MetricReport:
    name: str
    psnr_db: float
    ssim: float
    border_crop: int
    channel: str


def rgb_to_ycbcr(img: Image) -> Image:
    if img.channels != 3:
        raise ValueError(f"rgb_to_ycbcr needs 3 channels, got {img.channels}")
    px = np.tensordot(_YCC_MAT, img.pixels, axes=1) + _YCC_OFF[:, None, None]
    return Image(px, "YCbCr")


def ycbcr_to_rgb(img: Image) -> Image:
    if img.channels != 3:
        raise ValueError(f"ycbcr_to_rgb needs 3 channels, got {img.channels}")
    px = np.tensordot(_YCC_INV, img.pixels - _YCC_OFF[:, None, None], axes=1)
    return Image(px, "RGB")


def luma(img: Image) -> tuple:
    """The plane metrics are computed on, and its channel tag."""
    if img.colorspace == "YCbCr":
        return img.pixels[0], "Y"
    if img.channels == 3:
        return rgb_to_ycbcr(img).pixels[0], "Y"
    return img.pixels[0], "gray"


def _plane(x) -> np.ndarray:
    if isinstance(x, Image):
        x = x.pixels
    x = np.asarray(x, dtype=np.float64)
    return x


def _crop(x: np.ndarray, border: int) -> np.ndarray:
    if border < 0:
        raise ValueError("border must be non-negative")
    if border == 0:
        return x
    return x[..., border:-border, border:-border]


def psnr(a, b, border: int = 0) -> float:
    """10 log10(1 / MSE) for peak 1.0; identical inputs give ``PSNR_CAP``."""
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    a, b = _crop(a, border), _crop(b, border)
    if a.size == 0:
        raise ValueError("psnr: border crop leaves nothing to compare")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, border: int = 0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM, Gaussian window, mean over valid positions."""
    a, b = _plane(a), _plane(b)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError("ssim works on a single channel")
        a = a[0]
    if b.ndim == 3:
        if b.shape[0] != 1:
            raise ValueError("ssim works on a single channel")
        b = b[0]
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a, b = _crop(a, border), _crop(b, border)
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than the {window}x{window} window")
    if np.array_equal(a, b):
        return 1.0
    w = _gauss_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def image_metrics(name: str, pred: Image, target: Image, border: int) -> MetricReport:
    pa, channel = luma(pred)
    pb, _ = luma(target)
    return MetricReport(name, psnr(pa, pb, border), ssim(pa, pb, border), border, channel)


def border_for(task: str, scale: int) -> int:
    return scale if task == "sr" else 0


def evaluate(model, dictionary, testset, task: str = "sr", path: str = "basisconv",
             set_name: str = "test") -> list:
    """Per-image and mean metrics for the model and the no-learning baseline.

    ``testset`` is a list of ``(degraded, target)`` Image pairs. The baseline
    row is bicubic upsampling for SR and the degraded input itself otherwise.
    ``model=None`` evaluates only the baseline. Returns a list of dict rows.
    """
    from lapar.pipeline import restore, upsample_for

    scale = model.config.scale if model is not None else _infer_scale(testset)
    border = border_for(task, scale)
    rows = []
    methods = [("bicubic" if task == "sr" else "input", None)]
    if model is not None:
        methods.append((model.config.label(), model))
    for method, m in methods:
        reports = []
        for i, (lo, hi) in enumerate(testset):
            pred = upsample_for(lo, scale) if m is None else restore(m, dictionary, lo, path=path)
            reports.append(image_metrics(f"{set_name}[{i}]", pred, hi, border))
        for r in reports:
            rows.append({"method": method, "image": r.name, "psnr": r.psnr_db, "ssim": r.ssim,
                         "channel": r.channel, "border": border})
        rows.append({"method": method, "image": f"{set_name}[mean]",
                     "psnr": float(np.mean([r.psnr_db for r in reports])),
                     "ssim": float(np.mean([r.ssim for r in reports])),
                     "channel": reports[0].channel if reports else "", "border": border})
    return rows


def _infer_scale(testset) -> int:
    lo, hi = testset[0]
    return max(1, hi.height // lo.height)


def summary_table(rows: list, set_name: str, params: Optional[dict] = None,
                  multiadds: Optional[dict] = None) -> list:
    """Collapse per-image rows into one row per method (method, params,
    multiadds, <set> PSNR/SSIM)."""
    out = []
    for r in rows:
        if not r["image"].endswith("[mean]"):
            continue
        out.append({
            "method": r["method"],
            "params": (params or {}).get(r["method"], "-"),
            "multiadds": (multiadds or {}).get(r["method"], "-"),
            set_name: f"{r['psnr']:.2f}/{r['ssim']:.4f}",
        })
    return out


def write_table(rows: list, path, delimiter: str = "\t") -> None:
    if not rows:
        raise ValueError("nothing to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, delimiter=delimiter)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
