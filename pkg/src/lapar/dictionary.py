"""Gaussian / difference-of-Gaussians filter dictionaries.

Each basis is a k x k kernel sampled at integer offsets from the centre pixel
and normalised to sum to one. A DoG basis is stored as ``delta + (G1 - G2)``
(centre impulse plus a zero-sum band-pass), which keeps every row of the
dictionary matrix summing to one.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

PRESETS = ("72", "24", "14")


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianSpec:
    gamma: float = 1.0
    theta: float = 0.0
    sigma1: float = 1.0
    sigma2: float = 1.0

    @property
    def ratio(self) -> float:
        return self.sigma2 / self.sigma1

    def covariance(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        lam = np.diag([self.sigma1 ** 2, self.sigma2 ** 2])
        return self.gamma ** 2 * rot @ lam @ rot.T

    def label(self) -> str:
        return f"g{self.gamma:g}_r{self.ratio:g}_t{math.degrees(self.theta):g}"


@dataclass(frozen=True)
class BasisSpec:
    kind: str
    a: GaussianSpec
    b: Optional[GaussianSpec] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "dog"):
            raise DictionaryError(f"unknown basis kind {self.kind!r}")
        if self.kind == "dog" and (self.b is None or self.a == self.b):
            raise DictionaryError("a DoG basis needs two distinct Gaussian specs")

    def label(self) -> str:
        if self.kind == "gaussian":
            return self.a.label()
        return f"dog[{self.a.label()}-{self.b.label()}]"


@dataclass
class Dictionary:
    """Ordered filter bases; ``as_matrix`` is the (L, k*k) row-major stack."""

    bases: np.ndarray  # (L, k, k)
    specs: Union[list, str]
    name: str = "custom"

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.float64)
        if self.bases.ndim != 3 or self.bases.shape[1] != self.bases.shape[2]:
            raise DictionaryError(f"bases must be (L, k, k), got {self.bases.shape}")

    @property
    def L(self) -> int:
        return self.bases.shape[0]

    @property
    def k(self) -> int:
        return self.bases.shape[1]

    @property
    def as_matrix(self) -> np.ndarray:
        return self.bases.reshape(self.L, self.k * self.k)

    def labels(self) -> list:
        if isinstance(self.specs, str):
            return [f"{self.specs}{i}" for i in range(self.L)]
        return [s if isinstance(s, str) else s.label() for s in self.specs]


def _offset_grid(k: int):
    if k < 1 or k % 2 == 0:
        raise DictionaryError(f"kernel size must be a positive odd integer, got {k}")
    r = k // 2
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return xs.astype(np.float64), ys.astype(np.float64)


def gaussian_density(spec: GaussianSpec, k: int) -> np.ndarray:
    """Unnormalised bivariate normal density at the integer offsets of a k x k grid.

    Kernel column index is the x offset, row index the y offset.
    """
    if spec.gamma <= 0 or spec.sigma1 <= 0 or spec.sigma2 <= 0:
        raise DictionaryError(f"covariance of {spec} is not positive definite")
    cov = spec.covariance()
    det = np.linalg.det(cov)
    if not det > 0:
        raise DictionaryError(f"covariance of {spec} is not positive definite")
    inv = np.linalg.inv(cov)
    xs, ys = _offset_grid(k)
    q = inv[0, 0] * xs * xs + (inv[0, 1] + inv[1, 0]) * xs * ys + inv[1, 1] * ys * ys
    return np.exp(-0.5 * q) / (2 * math.pi * math.sqrt(det))


def gaussian_kernel(spec: GaussianSpec, k: int = 5) -> np.ndarray:
    g = gaussian_density(spec, k)
    return g / g.sum()


def dog_difference(a: GaussianSpec, b: GaussianSpec, k: int = 5) -> np.ndarray:
    """Raw ``G(a) - G(b)`` of two grid-normalised Gaussians (sums to zero)."""
    if a == b:
        raise DictionaryError("DoG of identical Gaussians is the zero filter")
    return gaussian_kernel(a, k) - gaussian_kernel(b, k)


def dog_kernel(a: GaussianSpec, b: GaussianSpec, k: int = 5, offset: str = "delta") -> np.ndarray:
    """DoG basis normalised to unit sum.

    ``offset="delta"`` adds the centre impulse; ``offset="none"`` returns the
    raw zero-sum difference (and breaks the unit-sum invariant).
    """
    diff = dog_difference(a, b, k)
    if offset == "none":
        return diff
    if offset != "delta":
        raise DictionaryError(f"unknown DoG offset mode {offset!r}")
    out = diff.copy()
    out[k // 2, k // 2] += 1.0
    return out


# -- configuration -----------------------------------------------------------

@dataclass
class GaussianGroup:
    """Gaussians of one scale/elongation, swept over orientation.

    ``ratio == 1`` is isotropic and contributes a single basis.
    """

    gamma: float
    ratio: float = 1.0
    theta_step_degrees: Optional[float] = None

    def expand(self, default_step: float) -> list:
        if self.ratio == 1.0:
            return [GaussianSpec(self.gamma, 0.0, 1.0, 1.0)]
        step = self.theta_step_degrees or default_step
        count = int(round(180.0 / step))
        if count < 1 or abs(count * step - 180.0) > 1e-9:
            raise DictionaryError(f"theta step {step} does not divide 180 degrees")
        return [GaussianSpec(self.gamma, math.radians(i * step), 1.0, self.ratio) for i in range(count)]


@dataclass
class DogGroup:
    """DoG bases ``a - b``; ``a`` may sweep orientations, ``b`` is fixed."""

    a: GaussianGroup
    b: GaussianGroup

    def expand(self, default_step: float) -> list:
        bs = self.b.expand(default_step)
        if len(bs) != 1:
            raise DictionaryError("the subtracted Gaussian of a DoG group must be isotropic")
        return [BasisSpec("dog", a, bs[0]) for a in self.a.expand(default_step)]


@dataclass
class DictionaryConfig:
    k: int = 5
    L: int = 72
    theta_step_degrees: float = 15.0
    gaussians: list = field(default_factory=list)
    dog_pairs: list = field(default_factory=list)
    dog_offset: str = "delta"
    preset: Optional[str] = None
    name: Optional[str] = None

    def basis_specs(self) -> list:
        specs = []
        for g in self.gaussians:
            specs += [BasisSpec("gaussian", s) for s in g.expand(self.theta_step_degrees)]
        for d in self.dog_pairs:
            specs += d.expand(self.theta_step_degrees)
        return specs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "DictionaryConfig":
        raw = dict(raw)
        preset = raw.get("preset")
        if preset is not None and not raw.get("gaussians") and not raw.get("dog_pairs"):
            base = preset_config(str(preset)).to_dict()
            base.update({key: v for key, v in raw.items() if v is not None})
            raw = base
        known = {"k", "L", "theta_step_degrees", "gaussians", "dog_pairs", "dog_offset", "preset", "name"}
        unknown = set(raw) - known
        if unknown:
            raise DictionaryError(f"unknown dictionary config keys: {sorted(unknown)}")
        raw["gaussians"] = [GaussianGroup(**g) for g in raw.get("gaussians", [])]
        raw["dog_pairs"] = [DogGroup(GaussianGroup(**d["a"]), GaussianGroup(**d["b"]))
                            for d in raw.get("dog_pairs", [])]
        if raw.get("preset") is not None:
            raw["preset"] = str(raw["preset"])
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "DictionaryConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def preset_config(name: str = "72") -> DictionaryConfig:
    """Bundled grids; the ``24`` and ``14`` grids are subsets of ``72``."""
    name = str(name)
    if name not in PRESETS:
        raise DictionaryError(f"unknown preset {name!r}; choose one of {PRESETS}")
    text = resources.files("lapar.configs").joinpath(f"dict_{name}.yaml").read_text()
    cfg = DictionaryConfig.from_dict(yaml.safe_load(text))
    cfg.preset = name
    return cfg


def build_dictionary(config: Optional[DictionaryConfig] = None) -> Dictionary:
    if config is None:
        config = preset_config("72")
    specs = config.basis_specs()
    if len(specs) != config.L:
        raise DictionaryError(f"grid expands to {len(specs)} bases but L={config.L} was declared")
    rows = []
    for s in specs:
        if s.kind == "gaussian":
            rows.append(gaussian_kernel(s.a, config.k))
        else:
            rows.append(dog_kernel(s.a, s.b, config.k, offset=config.dog_offset))
    name = config.name or (f"gdog{config.L}" if config.preset is None else f"gdog{config.preset}")
    return Dictionary(np.stack(rows), specs, name=name)


def random_dictionary(seed: int, L: int, k: int = 5) -> Dictionary:
    """Uniform(-1, 1) taps, each filter shifted so its taps sum to one."""
    if L < 1:
        raise DictionaryError(f"L must be >= 1, got {L}")
    _offset_grid(k)
    rng = np.random.default_rng(seed)
    taps = rng.uniform(-1.0, 1.0, size=(L, k * k))
    taps += (1.0 - taps.sum(axis=1, keepdims=True)) / (k * k)
    return Dictionary(taps.reshape(L, k, k), "random", name=f"random{L}")


def delta_dictionary(k: int = 5) -> Dictionary:
    d = np.zeros((1, k, k))
    d[0, k // 2, k // 2] = 1.0
    return Dictionary(d, "delta", name="delta")


# -- file formats ------------------------------------------------------------

_DICT_MAGIC = b"LDIC"
_DICT_VERSION = 1


def save_dictionary(d: Dictionary, path) -> None:
    """Binary layout: magic, u16 version, u32 name length, name, u32 L, u32 k,
    u32 label-block length, newline-joined labels, f64 LE taps, CRC32."""
    name = d.name.encode()
    labels = "\n".join(d.labels()).encode()
    body = bytearray(_DICT_MAGIC)
    body += struct.pack("<HI", _DICT_VERSION, len(name)) + name
    body += struct.pack("<III", d.L, d.k, len(labels)) + labels
    body += d.as_matrix.astype("<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_dictionary(path) -> Dictionary:
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != _DICT_MAGIC:
        raise DictionaryError(f"{path}: not a dictionary file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise DictionaryError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, nlen = struct.unpack_from("<HI", raw, 4)
    if version != _DICT_VERSION:
        raise DictionaryError(f"{path}: unsupported dictionary version {version}")
    pos = 10
    name = raw[pos:pos + nlen].decode()
    pos += nlen
    L, k, llen = struct.unpack_from("<III", raw, pos)
    pos += 12
    labels = raw[pos:pos + llen].decode().split("\n") if llen else []
    pos += llen
    taps = np.frombuffer(raw, dtype="<f8", count=L * k * k, offset=pos)
    if pos + taps.nbytes != len(raw) - 4:
        raise DictionaryError(f"{path}: payload size does not match L={L}, k={k}")
    specs = labels if len(labels) == L else "loaded"
    return Dictionary(taps.reshape(L, k, k).astype(np.float64), specs, name=name)


def minmax_normalize(taps: np.ndarray) -> np.ndarray:
    """Map taps to [0, 1]; a constant filter maps to 0.5 everywhere."""
    lo, hi = float(taps.min()), float(taps.max())
    if hi == lo:
        return np.full(taps.shape, 0.5)
    return (taps - lo) / (hi - lo)


def export_filters(d: Dictionary, path, scale: int = 8) -> list:
    """Write one 8-bit grayscale PNG per basis plus ``montage.png``.

    Each filter is min-max normalised independently; ``scale`` is the
    nearest-neighbour magnification of each tap.
    """
    from PIL import Image as PILImage

    out_dir = Path(path)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create filter export directory {out_dir}: {exc}") from exc
    written = []
    tiles = []
    for i, taps in enumerate(d.bases):
        img = _to_u8(minmax_normalize(taps))
        tile = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
        tiles.append(tile)
        p = out_dir / f"filter_{i:03d}.png"
        PILImage.fromarray(tile).save(p)
        written.append(p)
    cols = min(12, len(tiles))
    rows = -(-len(tiles) // cols)
    th, tw = tiles[0].shape
    gap = max(1, scale // 2)
    sheet = np.full((rows * (th + gap) + gap, cols * (tw + gap) + gap), 255, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y, x = gap + r * (th + gap), gap + c * (tw + gap)
        sheet[y:y + th, x:x + tw] = tile
    p = out_dir / "montage.png"
    PILImage.fromarray(sheet).save(p)
    written.append(p)
    return written


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
