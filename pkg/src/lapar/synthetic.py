"""Procedural test images: smooth backgrounds with anti-aliased shapes,
lines and a little sinusoidal texture. Fully determined by the seed."""
import numpy as np

from lapar.imaging import Image


def synthetic_image(seed: int, size: int = 96, channels: int = 3, supersample: int = 4) -> Image:
    rng = np.random.default_rng(seed)
    n = size * supersample
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = rng.uniform(0.2, 0.8, size=channels)
    grad = rng.uniform(-0.3, 0.3, size=(channels, 2))
    img = base[:, None, None] + grad[:, 0, None, None] * (yy - 0.5) + grad[:, 1, None, None] * (xx - 0.5)

    for _ in range(rng.integers(5, 10)):
        color = rng.uniform(0.0, 1.0, size=channels)
        kind = rng.integers(0, 4)
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        if kind == 0:  # rotated rectangle
            a = rng.uniform(0, np.pi)
            hw, hh = rng.uniform(0.05, 0.3, size=2)
            u = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
            v = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
            mask = (np.abs(u) < hw) & (np.abs(v) < hh)
        elif kind == 1:  # ellipse
            ry, rx = rng.uniform(0.04, 0.25, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        elif kind == 2:  # thick line
            a = rng.uniform(0, np.pi)
            d = (xx - cx) * np.sin(a) - (yy - cy) * np.cos(a)
            mask = np.abs(d) < rng.uniform(0.004, 0.02)
        else:  # stripes inside a disc
            r = rng.uniform(0.1, 0.3)
            f = rng.uniform(8, 24)
            a = rng.uniform(0, np.pi)
            phase = (xx * np.cos(a) + yy * np.sin(a)) * f * 2 * np.pi
            mask = (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r) & (np.sin(phase) > 0)
        alpha = rng.uniform(0.6, 1.0)
        img = np.where(mask[None], (1 - alpha) * img + alpha * color[:, None, None], img)

    img = img.reshape(channels, size, supersample, size, supersample).mean(axis=(2, 4))
    return Image(np.clip(img, 0.0, 1.0), "RGB" if channels == 3 else "Gray")


def synthetic_set(count: int, seed: int, size: int = 96, channels: int = 3) -> list:
    return [synthetic_image(seed * 100003 + i, size, channels) for i in range(count)]
