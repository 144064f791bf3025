"""The coefficient network: LR image -> per-HR-pixel dictionary coefficients.

Layout (every convolution is weight-normalised)::

    head   3x3 conv, in_channels -> C
    body   M local fusion blocks:
             four chained 3x3 convs (C -> C) each followed by leaky-relu(0.1),
             concat of the four outputs -> 1x1 fuse back to C, plus the block input
    tail   3x3 conv C -> L*s*s, pixel shuffle (skipped for s == 1),
           3x3 conv L -> L, leaky-relu, 3x3 conv L -> L (coefficients)
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from lapar import tensor as T
from lapar.tensor import Tensor

PRESETS = {"A": (32, 4), "B": (24, 3), "C": (16, 2)}
TASKS = ("sr", "denoise", "deblock")
SLOPE = 0.1
LFB_CONVS = 4


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 32
    blocks: int = 4
    L: int = 72
    k: int = 5
    scale: int = 2
    task: str = "sr"
    in_channels: int = 3
    name: Optional[str] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task != "sr":
            self.scale = 1
        if self.scale not in (1, 2, 3, 4):
            raise ValueError(f"scale must be one of 1..4, got {self.scale}")
        if self.channels < 1 or self.blocks < 0 or self.L < 1:
            raise ValueError(f"invalid model config {self}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd, got {self.k}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        name = name.upper().removeprefix("LAPAR-")
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        c, m = PRESETS[name]
        return cls(channels=c, blocks=m, name=f"LAPAR-{name}", **kw)

    def label(self) -> str:
        return self.name or f"C{self.channels}-M{self.blocks}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # name -> Tensor, insertion order is the canonical layer order

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        return ModelState(ModelConfig(**self.config.to_dict()),
                          {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                           for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelState":
        return ModelState(ModelConfig(**self.config.to_dict()),
                          {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                           for k, v in self.params.items()})


def layer_specs(cfg: ModelConfig) -> list:
    """(layer name, in channels, out channels, kernel, runs at HR?) in forward order."""
    c, s, L = cfg.channels, cfg.scale, cfg.L
    specs = [("head", cfg.in_channels, c, 3, False)]
    for b in range(cfg.blocks):
        for j in range(LFB_CONVS):
            specs.append((f"body.{b}.conv{j}", c, c, 3, False))
        specs.append((f"body.{b}.fuse", LFB_CONVS * c, c, 1, False))
    specs.append(("tail.expand", c, L * s * s, 3, False))
    specs.append(("tail.conv0", L, L, 3, True))
    specs.append(("tail.conv1", L, L, 3, True))
    return specs


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    for name, cin, cout, k, _ in layer_specs(cfg):
        shapes[f"{name}.direction"] = (cout, cin, k, k)
        shapes[f"{name}.gain"] = (cout,)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def identity_coefficients(bank: np.ndarray) -> np.ndarray:
    """Min-norm coefficients c with sum_l c_l * bank_l closest to the centre delta."""
    bank = np.asarray(bank, dtype=np.float64)
    L, k = bank.shape[0], bank.shape[-1]
    delta = np.zeros(k * k)
    delta[(k * k) // 2] = 1.0
    return np.linalg.lstsq(bank.reshape(L, -1).T, delta, rcond=None)[0]


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                base_coeffs: Optional[np.ndarray] = None, tail_scale: float = 0.1) -> ModelState:
    """He fan-in normal directions; gains start at the direction norms.

    With ``base_coeffs`` the last layer starts as a small perturbation around
    that constant coefficient vector (its gain is scaled by ``tail_scale``), so
    an untrained model already reproduces the filtered input.
    """
    if base_coeffs is not None and np.shape(base_coeffs) != (cfg.L,):
        raise ValueError(f"base_coeffs must have shape ({cfg.L},), got {np.shape(base_coeffs)}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, k, _ in layer_specs(cfg):
        fan_in = cin * k * k
        v = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        g = np.sqrt((v.reshape(cout, -1) ** 2).sum(axis=1))
        params[f"{name}.direction"] = Tensor(v.astype(dtype), requires_grad=True)
        b = np.zeros(cout)
        if base_coeffs is not None and name == "tail.conv1":
            g = g * tail_scale
            b = np.asarray(base_coeffs, dtype=np.float64)
        params[f"{name}.gain"] = Tensor(g.astype(dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(b.astype(dtype), requires_grad=True)
    return ModelState(cfg, params)


def _conv(model: ModelState, name: str, x: Tensor) -> Tensor:
    p = model.params
    v = p[f"{name}.direction"]
    return T.weight_norm_conv2d(x, v, p[f"{name}.gain"], p[f"{name}.bias"], padding=v.shape[2] // 2)


def forward(model: ModelState, x) -> Tensor:
    """(N, in_channels, H, W) -> coefficients (N, L, s*H, s*W)."""
    cfg = model.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
    if min(x.shape[2:]) < cfg.k:
        raise ValueError(f"input {x.shape[2]}x{x.shape[3]} is smaller than k={cfg.k}")
    dtype = model.params["head.direction"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype), requires_grad=x.requires_grad)

    h = _conv(model, "head", x)
    for b in range(cfg.blocks):
        feats, f = [], h
        for j in range(LFB_CONVS):
            f = T.leaky_relu(_conv(model, f"body.{b}.conv{j}", f), SLOPE)
            feats.append(f)
        h = T.add(h, _conv(model, f"body.{b}.fuse", T.concat_channels(feats)))
    h = _conv(model, "tail.expand", h)
    if cfg.scale > 1:
        h = T.pixel_shuffle(h, cfg.scale)
    h = T.leaky_relu(_conv(model, "tail.conv0", h), SLOPE)
    return _conv(model, "tail.conv1", h)


# -- cost accounting ---------------------------------------------------------

def count_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def conv_multiadds(cin: int, cout: int, k: int, out_h: int, out_w: int) -> int:
    return cin * cout * k * k * out_h * out_w


def count_multiadds(cfg: ModelConfig, out_h: int, out_w: int, include_filtering: bool = True) -> int:
    """Multiply-adds to produce an ``out_h`` x ``out_w`` output.

    LR layers run at (out_h / s, out_w / s). The filtering stage costs
    L*k*k (basis responses) + L (combination) per output pixel and channel.
    """
    s = cfg.scale
    lr_h, lr_w = out_h // s, out_w // s
    total = 0
    for _, cin, cout, k, hr in layer_specs(cfg):
        h, w = (out_h, out_w) if hr else (lr_h, lr_w)
        total += conv_multiadds(cin, cout, k, h, w)
    if include_filtering:
        total += cfg.in_channels * (cfg.L * cfg.k * cfg.k + cfg.L) * out_h * out_w
    return total


# -- checkpoints -------------------------------------------------------------

MAGIC = b"LPAR"
FORMAT_VERSION = 1


def _pack(config_text: str, tensors: dict) -> bytes:
    body = bytearray(MAGIC)
    body += struct.pack("<H", FORMAT_VERSION)
    ctext = config_text.encode()
    body += struct.pack("<I", len(ctext)) + ctext
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode()
        body += struct.pack("<I", len(nb)) + nb
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def _unpack(raw: bytes, source="checkpoint") -> tuple:
    if len(raw) < 14 or raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch (truncated or corrupt)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    pos = 6
    end = len(raw) - 4
    try:
        (clen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        config_text = raw[pos:pos + clen].decode()
        pos += clen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > end:
                raise CheckpointError(f"{source}: tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from exc
    if pos != end:
        raise CheckpointError(f"{source}: {end - pos} trailing bytes before the CRC")
    return config_text, tensors


def save(model: ModelState, path, extra_tensors: Optional[dict] = None, extra_config: Optional[dict] = None) -> None:
    """Write the binary checkpoint; ``extra_*`` carry optimizer/training state."""
    meta = {"model": model.config.to_dict()}
    if extra_config:
        meta.update(extra_config)
    tensors = {k: v.data for k, v in model.params.items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    Path(path).write_bytes(_pack(json.dumps(meta, sort_keys=True), tensors))


def load_raw(path) -> tuple:
    """(metadata dict, tensors dict) without building a model."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    text, tensors = _unpack(raw, str(path))
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: config block is not valid JSON") from exc
    return meta, tensors


def load(path) -> ModelState:
    meta, tensors = load_raw(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: no model config in checkpoint")
    cfg = ModelConfig(**meta["model"])
    expected = param_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {tensors[name].shape}, "
                                  f"config implies {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return ModelState(cfg, params)
