"""Closed-form coefficient fits (no network) used as references and upper bounds.

The per-pixel objective has one equation and L unknowns, so on its own it is
underdetermined. ``fit_windowed`` shares one coefficient vector over a
w x w window around each pixel and adds a small ridge penalty; ``fit_global``
shares a single vector over the whole image.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from lapar.assembly import CoefficientMap
from lapar.dictionary import Dictionary
from lapar.imaging import Image, PatchMatrix, bicubic_resize, extract_patches
from lapar.metrics import luma, psnr

JITTER = 1e-10


@dataclass
class RidgeProblem:
    responses: np.ndarray  # (H, W, L): D B_i^T per pixel
    targets: np.ndarray    # (H, W)
    window: int = 7
    ridge_lambda: float = 1e-4

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be non-negative")
        L = self.responses.shape[-1]
        if self.window ** 2 < L and self.ridge_lambda == 0:
            raise ValueError(f"window {self.window}x{self.window} has fewer equations than L={L}; "
                             f"use ridge_lambda > 0")
        if self.responses.shape[:2] != self.targets.shape:
            raise ValueError(f"responses {self.responses.shape} do not match targets {self.targets.shape}")

    @classmethod
    def from_patches(cls, patches: PatchMatrix, d: Dictionary, y, window: int = 7,
                     ridge_lambda: float = 1e-4) -> "RidgeProblem":
        return cls(responses_of(patches, d), _target_plane(y, patches), window, ridge_lambda)


@dataclass
class GlobalFit:
    phi: np.ndarray
    residual: float  # mean squared prediction error
    rank_deficient: bool


@dataclass
class WindowedFit:
    phi: CoefficientMap
    prediction: np.ndarray
    residual: float  # mean squared prediction error at window centres


def responses_of(patches: PatchMatrix, d: Dictionary) -> np.ndarray:
    if patches.k != d.k:
        raise ValueError(f"patch size k={patches.k} does not match dictionary k={d.k}")
    return (patches.data @ d.as_matrix.T).reshape(patches.height, patches.width, d.L)


def _target_plane(y, patches: PatchMatrix) -> np.ndarray:
    y = y.pixels if isinstance(y, Image) else np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        y = y[0]
    if y.shape != (patches.height, patches.width):
        raise ValueError(f"target {y.shape} does not match patch grid {patches.height}x{patches.width}")
    return y


def fit_global(patches: PatchMatrix, d: Dictionary, y) -> GlobalFit:
    """One shared coefficient vector, least squares via jittered normal equations."""
    if patches.rows < d.L:
        raise ValueError(f"need at least L={d.L} pixels, got {patches.rows}")
    r = responses_of(patches, d).reshape(-1, d.L)
    t = _target_plane(y, patches).reshape(-1)
    gram = r.T @ r
    rhs = r.T @ t
    evals, evecs = np.linalg.eigh(gram)
    deficient = bool(evals[0] <= JITTER * max(1.0, evals[-1]) * 1e3)
    phi = evecs @ ((evecs.T @ rhs) / (evals + JITTER))
    resid = float(np.mean((r @ phi - t) ** 2))
    return GlobalFit(phi, resid, deficient)


def single_filter_residuals(patches: PatchMatrix, d: Dictionary, y) -> np.ndarray:
    """Residual of each one-hot coefficient vector (each basis on its own)."""
    r = responses_of(patches, d).reshape(-1, d.L)
    t = _target_plane(y, patches).reshape(-1, 1)
    return np.mean((r - t) ** 2, axis=0)


def fit_windowed(problem: RidgeProblem, chunk: int = 4096) -> WindowedFit:
    """Per-pixel ridge solutions over truncated w x w windows."""
    resp, tgt = problem.responses, problem.targets
    h, w, L = resp.shape
    size = (problem.window, problem.window)
    area = float(problem.window ** 2)

    def window_sum(a):
        return uniform_filter(a, size=size + (1,) * (a.ndim - 2), mode="constant") * area

    outer = resp[..., :, None] * resp[..., None, :]
    gram = window_sum(outer.reshape(h, w, L * L)).reshape(h * w, L, L)
    rhs = window_sum(resp * tgt[..., None]).reshape(h * w, L)
    gram[:, np.arange(L), np.arange(L)] += problem.ridge_lambda
    phi = np.empty((h * w, L))
    for lo in range(0, h * w, chunk):
        phi[lo:lo + chunk] = np.linalg.solve(gram[lo:lo + chunk], rhs[lo:lo + chunk, :, None])[..., 0]
    pred = np.einsum("pl,pl->p", phi, resp.reshape(-1, L)).reshape(h, w)
    resid = float(np.mean((pred - tgt) ** 2))
    return WindowedFit(CoefficientMap(phi.T.reshape(L, h, w)), pred, resid)


def window_objective(problem: RidgeProblem, phi) -> np.ndarray:
    """Per-pixel ridge objective sum_j (r_j . phi_i - t_j)^2 + lambda |phi_i|^2.

    ``phi`` is a CoefficientMap, an (L, H, W) array, or one shared L-vector.
    The sum runs over the truncated window around each pixel, matching what
    ``fit_windowed`` minimises.
    """
    resp, tgt = problem.responses, problem.targets
    h, w, L = resp.shape
    coeffs = phi.coeffs if isinstance(phi, CoefficientMap) else np.asarray(phi, dtype=np.float64)
    if coeffs.ndim == 1:
        coeffs = np.broadcast_to(coeffs[:, None, None], (L, h, w))
    coeffs = np.moveaxis(coeffs, 0, -1)
    r = problem.window // 2
    total = problem.ridge_lambda * np.sum(coeffs ** 2, axis=-1)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            # pixel (y, x) sees sample (y + dy, x + dx) when it lies inside the image
            ys, yd = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
            xs, xd = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
            err = np.einsum("hwl,hwl->hw", resp[yd, xd], coeffs[ys, xs]) - tgt[yd, xd]
            total[ys, xs] += err ** 2
    return total


def dense_window_solve(problem: RidgeProblem, y0: int, x0: int) -> np.ndarray:
    """Reference solve of one pixel's window system with an explicit matrix."""
    r = problem.window // 2
    h, w, L = problem.responses.shape
    ys = slice(max(0, y0 - r), min(h, y0 + r + 1))
    xs = slice(max(0, x0 - r), min(w, x0 + r + 1))
    a = problem.responses[ys, xs].reshape(-1, L)
    b = problem.targets[ys, xs].reshape(-1)
    lhs = np.vstack([a, np.sqrt(problem.ridge_lambda) * np.eye(L)])
    rhs = np.concatenate([b, np.zeros(L)])
    return np.linalg.lstsq(lhs, rhs, rcond=None)[0]


# -- ablation ---------------------------------------------------------------

def oracle_psnr(d: Dictionary, lr: Image, hr: Image, scale: int, window: int = 7,
                ridge_lambda: float = 1e-4) -> tuple:
    """(PSNR dB, centre residual) of the windowed fit on the luma plane."""
    up = bicubic_resize(lr, scale) if scale > 1 else lr
    up_y, _ = luma(up)
    hr_y, _ = luma(hr)
    patches = extract_patches(up_y, d.k)
    fit = fit_windowed(RidgeProblem.from_patches(patches, d, hr_y, window, ridge_lambda))
    border = scale if scale > 1 else 0
    return psnr(fit.prediction, hr_y, border), fit.residual


def ablation_report(dicts: list, images: list, scale: int = 2, window: int = 7,
                    ridge_lambda: float = 1e-4) -> list:
    """Mean oracle PSNR per dictionary over ``images`` ((lr, hr) pairs), best first."""
    if not dicts or not images:
        raise ValueError("ablation needs at least one dictionary and one image")
    rows = []
    for d in dicts:
        scores = [oracle_psnr(d, lo, hi, scale, window, ridge_lambda) for lo, hi in images]
        rows.append({"dictionary": d.name, "L": d.L,
                     "psnr_db": float(np.mean([s[0] for s in scores])),
                     "mean_residual": float(np.mean([s[1] for s in scores]))})
    rows.sort(key=lambda r: (-r["psnr_db"], r["dictionary"]))
    return rows


def write_ablation(rows: list, path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter=delimiter)
        wr.writerow(["dictionary-name", "L", "PSNR-dB", "mean-residual"])
        for r in rows:
            wr.writerow([r["dictionary"], r["L"], f"{r['psnr_db']:.4f}", f"{r['mean_residual']:.6e}"])
