"""Training: data preparation, augmentation, Charbonnier loss, Adam with a
cosine schedule, validation, checkpoints and exact resume."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from lapar import net
from lapar import tensor as T
from lapar.assembly import basis_responses
from lapar.dictionary import Dictionary
from lapar.imaging import (DegradationSpec, bicubic_resize_array, default_blur, degrade,
                           simulate_blocking)
from lapar.metrics import luma, psnr
from lapar.tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# -- loss / schedule / optimizer ---------------------------------------------

def charbonnier_loss(pred: Tensor, target, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2)); ``target`` is a constant."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ValueError(f"charbonnier_loss: shape mismatch {pred.shape} vs {tgt.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    diff = pred.data - tgt
    root = np.sqrt(diff * diff + eps * eps)
    n = diff.size
    value = np.asarray(root.mean())
    return T.make_op("charbonnier", value, (pred,), lambda g: (g * diff / root / n,))


def cosine_lr(it: int, total: int, lr_init: float, lr_final: float) -> float:
    if total <= 0:
        return lr_init
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * it / total))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, state: AdamState, lr: float, grads: Optional[dict] = None) -> None:
    """Bias-corrected Adam update, in place. ``grads`` defaults to each ``.grad``."""
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; aborting step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"moment buffer for {name!r} has shape {m.shape}, parameter {p.data.shape}")
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


# -- configuration -----------------------------------------------------------

@dataclass
class TrainConfig:
    task: str = "sr"
    model: dict = field(default_factory=lambda: {"channels": 8, "blocks": 1, "L": 14, "scale": 2})
    dictionary: str = "14"
    batch_size: int = 8
    total_iters: int = 2000
    lr_init: float = 4e-4
    lr_final: float = 1e-7
    patch: int = 64
    seed: int = 0
    eps_charbonnier: float = 1e-3
    noise_range: tuple = (0.0, 55.0)
    quality_range: tuple = (20, 50)
    train_images: int = 16
    val_images: int = 4
    image_size: int = 96
    augment: bool = True
    val_every: int = 500
    ckpt_every: int = 500
    out_dir: Optional[str] = None
    precision: str = "f32"
    coeff_init: str = "least_squares"  # least_squares | identity | none
    init_ridge: float = 1e-6
    tail_scale: float = 0.0  # initial gain of the last layer; 0 starts exactly at the shared coefficients

    def __post_init__(self):
        self.noise_range = tuple(self.noise_range)
        self.quality_range = tuple(self.quality_range)
        mc = self.model_config()
        if self.patch % mc.scale:
            raise ValueError(f"patch {self.patch} is not divisible by scale {mc.scale}")
        if not self.lr_final < self.lr_init:
            raise ValueError("lr_final must be smaller than lr_init")
        if self.coeff_init not in ("least_squares", "identity", "none"):
            raise ValueError(f"unknown coeff_init {self.coeff_init!r}")

    def model_config(self) -> net.ModelConfig:
        raw = dict(self.model)
        preset = raw.pop("preset", None)
        raw.setdefault("task", self.task)
        if preset:
            return net.ModelConfig.preset(preset, **raw)
        return net.ModelConfig(**raw)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_range"] = list(self.noise_range)
        d["quality_range"] = list(self.quality_range)
        d["model"] = self.model_config().to_dict()
        return d

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


# -- data --------------------------------------------------------------------

@dataclass
class TaskDataset:
    """(input, target) image pairs plus the per-sample degradation parameter."""

    task: str
    scale: int
    pairs: list
    params: list


@dataclass
class SamplePair:
    input: np.ndarray   # (ch, h, w)
    target: np.ndarray  # (ch, s*h, s*w)
    offset: tuple
    flip_h: bool
    flip_v: bool
    rot90: int


def sample_task_param(task: str, spec: dict, seed: int, index: int) -> tuple:
    """(noise sigma in [0, 1] units | JPEG quality, noise seed) for one sample."""
    rng = np.random.default_rng([seed, index, 7])
    if task == "denoise":
        lo, hi = spec.get("noise_range", (0.0, 55.0))
        return float(rng.uniform(lo, hi)) / 255.0, int(rng.integers(2 ** 31))
    if task == "deblock":
        lo, hi = spec.get("quality_range", (20, 50))
        return int(rng.integers(lo, hi + 1)), 0
    raise ValueError(f"task {task!r} has no per-sample parameter")


def prepare_task_data(images: list, task: str, spec: Optional[dict] = None, seed: int = 0) -> TaskDataset:
    """Degrade clean images for a task.

    ``spec`` keys: ``scale`` (sr), ``noise_range`` in 0-255 units (denoise),
    ``quality_range`` (deblock). Per-sample noise level / quality are drawn
    uniformly from the range with a seed derived from (seed, index).
    """
    spec = dict(spec or {})
    pairs, params = [], []
    for i, hr in enumerate(images):
        if task == "sr":
            s = int(spec.get("scale", 2))
            h, w = hr.height - hr.height % s, hr.width - hr.width % s
            hr = hr.with_pixels(np.ascontiguousarray(hr.pixels[:, :h, :w]))
            deg = DegradationSpec("sr", s, blur=spec.get("blur", default_blur(s)))
            pairs.append((degrade(hr, deg), hr))
            params.append(s)
        elif task == "denoise":
            sigma, noise_seed = sample_task_param("denoise", spec, seed, i)
            noisy = degrade(hr, DegradationSpec("denoise", noise_sigma=sigma), seed=noise_seed)
            pairs.append((noisy, hr))
            params.append(sigma)
        elif task == "deblock":
            q, _ = sample_task_param("deblock", spec, seed, i)
            pairs.append((simulate_blocking(hr, q), hr))
            params.append(q)
        else:
            raise ValueError(f"unknown task {task!r}")
    scale = int(spec.get("scale", 2)) if task == "sr" else 1
    return TaskDataset(task, scale, pairs, params)


def _augment(a: np.ndarray, flip_h: bool, flip_v: bool, rot: int) -> np.ndarray:
    if flip_h:
        a = a[..., ::-1]
    if flip_v:
        a = a[..., ::-1, :]
    if rot:
        a = np.rot90(a, rot, axes=(-2, -1))
    return np.ascontiguousarray(a)


def sample_batch(dataset: TaskDataset, cfg: TrainConfig, rng: np.random.Generator) -> list:
    """Random aligned crops with consistent flip / quarter-turn augmentation."""
    s = dataset.scale
    ps = cfg.patch
    lp = ps // s
    usable = [i for i, (_, hi) in enumerate(dataset.pairs) if hi.height >= ps and hi.width >= ps]
    if len(usable) < len(dataset.pairs):
        log.warning("skipping %d images smaller than the %d px patch", len(dataset.pairs) - len(usable), ps)
    if not usable:
        raise ValueError("no image is large enough for the configured patch size")
    batch = []
    for _ in range(cfg.batch_size):
        idx = usable[int(rng.integers(len(usable)))]
        lo, hi = dataset.pairs[idx]
        y = int(rng.integers(lo.height - lp + 1))
        x = int(rng.integers(lo.width - lp + 1))
        inp = lo.pixels[:, y:y + lp, x:x + lp]
        tgt = hi.pixels[:, y * s:y * s + ps, x * s:x * s + ps]
        if cfg.augment:
            fh, fv, rot = bool(rng.integers(2)), bool(rng.integers(2)), int(rng.integers(4))
        else:
            fh = fv = False
            rot = 0
        batch.append(SamplePair(_augment(inp, fh, fv, rot), _augment(tgt, fh, fv, rot),
                                (y * s, x * s), fh, fv, rot))
    return batch


def batch_arrays(batch: list, scale: int, dtype=np.float32) -> tuple:
    """Stack a batch into (network input, filtering image, target) arrays."""
    inp = np.stack([b.input for b in batch]).astype(dtype)
    tgt = np.stack([b.target for b in batch]).astype(dtype)
    up = bicubic_resize_array(inp, scale) if scale > 1 else inp
    return inp, up.astype(dtype), tgt


def batch_loss(model: net.ModelState, d: Dictionary, inp, up, tgt, eps: float) -> Tensor:
    n, ch, h, w = up.shape
    resp = basis_responses(up.reshape(n * ch, h, w), d).reshape(n, ch, d.L, h, w)
    phi = net.forward(model, Tensor(inp))
    pred = T.basis_combine(phi, resp)
    return charbonnier_loss(pred, tgt, eps)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: net.ModelState
    losses: list
    log_rows: list
    adam: AdamState


def validate(model: net.ModelState, d: Dictionary, val: TaskDataset) -> float:
    from lapar.pipeline import restore

    border = val.scale if val.task == "sr" else 0
    vals = []
    for lo, hi in val.pairs:
        pred = restore(model, d, lo)
        vals.append(psnr(luma(pred)[0], luma(hi)[0], border))
    return float(np.mean(vals))


def save_training_checkpoint(path, model: net.ModelState, adam: AdamState, it: int, cfg: TrainConfig) -> None:
    extra = {}
    for name in model.params:
        if name in adam.m:
            extra[f"adam.m.{name}"] = adam.m[name]
            extra[f"adam.v.{name}"] = adam.v[name]
    meta = {"train": {"iter": it, "adam_t": adam.t, "config": cfg.to_dict()}}
    tmp = Path(str(path) + ".tmp")
    net.save(model, tmp, extra_tensors=extra, extra_config=meta)
    tmp.replace(path)


def load_training_checkpoint(path) -> tuple:
    meta, tensors = net.load_raw(path)
    model = net.load(path)
    if "train" not in meta:
        raise net.CheckpointError(f"{path}: not a training checkpoint")
    adam = AdamState(t=int(meta["train"]["adam_t"]))
    for name in model.params:
        if f"adam.m.{name}" in tensors:
            adam.m[name] = tensors[f"adam.m.{name}"].copy()
            adam.v[name] = tensors[f"adam.v.{name}"].copy()
    return model, adam, int(meta["train"]["iter"])


def shared_coefficients(dataset: TaskDataset, d: Dictionary, ridge: float = 1e-6) -> np.ndarray:
    """Ridge least-squares coefficient vector shared by every training pixel.

    ``ridge`` is relative to the mean diagonal of the Gram matrix, which keeps
    the solution small when the dictionary is rank deficient.
    """
    gram = np.zeros((d.L, d.L))
    rhs = np.zeros(d.L)
    for lo, hi in dataset.pairs:
        up = bicubic_resize_array(lo.pixels, dataset.scale) if dataset.scale > 1 else lo.pixels
        resp = basis_responses(up, d).transpose(0, 2, 3, 1).reshape(-1, d.L)
        gram += resp.T @ resp
        rhs += resp.T @ hi.pixels.reshape(-1)
    gram[np.diag_indices(d.L)] += ridge * np.trace(gram) / d.L
    return np.linalg.solve(gram, rhs)


def initial_coefficients(cfg: TrainConfig, dataset: TaskDataset, d: Dictionary) -> Optional[np.ndarray]:
    if cfg.coeff_init == "least_squares":
        return shared_coefficients(dataset, d, cfg.init_ridge)
    if cfg.coeff_init == "identity":
        return net.identity_coefficients(d.bases)
    return None


def train(cfg: TrainConfig, dataset: TaskDataset, d: Dictionary, val: Optional[TaskDataset] = None,
          resume_from=None, stop_at: Optional[int] = None, model: Optional[net.ModelState] = None) -> TrainResult:
    """Run (or resume) training.

    Iteration ``it`` (1-based) samples its batch from a generator seeded with
    ``(cfg.seed, it)``, so a resumed run replays the uninterrupted one exactly.
    ``stop_at`` ends early after that iteration (used to test resuming).
    """
    mcfg = cfg.model_config()
    if mcfg.L != d.L or mcfg.k != d.k:
        raise ValueError(f"model L={mcfg.L}/k={mcfg.k} does not match dictionary L={d.L}/k={d.k}")
    start = 0
    if resume_from is not None:
        model, adam, start = load_training_checkpoint(resume_from)
        model = model.astype(cfg.dtype)
        adam.m = {k: v.astype(cfg.dtype) for k, v in adam.m.items()}
        adam.v = {k: v.astype(cfg.dtype) for k, v in adam.v.items()}
    else:
        base = initial_coefficients(cfg, dataset, d)
        model = model or net.build_model(mcfg, seed=cfg.seed, dtype=cfg.dtype, base_coeffs=base,
                                          tail_scale=cfg.tail_scale)
        adam = AdamState()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.tsv" if out_dir else None
    if log_path and start == 0:
        log_path.write_text("iter\tlr\tloss\tval_psnr\n")

    losses, rows = [], []
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    last_good = None
    for it in range(start + 1, end + 1):
        lr = cosine_lr(it - 1, cfg.total_iters, cfg.lr_init, cfg.lr_final)
        rng = np.random.default_rng([cfg.seed, it])
        inp, up, tgt = batch_arrays(sample_batch(dataset, cfg, rng), dataset.scale, cfg.dtype)
        model.zero_grad()
        loss = batch_loss(model, d, inp, up, tgt, cfg.eps_charbonnier)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at iteration {it}; last good checkpoint: {last_good}")
        T.backward(loss)
        try:
            adam_step(model.params, adam, lr)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; last good checkpoint: {last_good}") from exc
        losses.append(value)
        val_psnr = None
        if val is not None and cfg.val_every and (it % cfg.val_every == 0 or it == cfg.total_iters):
            val_psnr = validate(model, d, val)
            log.info("iter %d loss %.6f val %.3f dB", it, value, val_psnr)
        row = {"iter": it, "lr": lr, "loss": value, "val_psnr": val_psnr}
        rows.append(row)
        if log_path:
            with open(log_path, "a") as fh:
                vp = "" if val_psnr is None else f"{val_psnr:.6f}"
                fh.write(f"{it}\t{lr:.10g}\t{value!r}\t{vp}\n")
        if out_dir and cfg.ckpt_every and (it % cfg.ckpt_every == 0 or it == end):
            last_good = out_dir / f"ckpt_{it:07d}.lpar"
            save_training_checkpoint(last_good, model, adam, it, cfg)
            save_training_checkpoint(out_dir / "last.lpar", model, adam, it, cfg)
    if out_dir:
        (out_dir / "train_config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return TrainResult(model, losses, rows, adam)


def toy_datasets(cfg: TrainConfig) -> tuple:
    """Synthetic train / validation sets sized by the config."""
    from lapar.synthetic import synthetic_set

    ch = cfg.model_config().in_channels
    spec = {"scale": cfg.model_config().scale, "noise_range": cfg.noise_range,
            "quality_range": cfg.quality_range}
    train_imgs = synthetic_set(cfg.train_images, cfg.seed + 1, cfg.image_size, ch)
    val_imgs = synthetic_set(cfg.val_images, cfg.seed + 1000, cfg.image_size, ch)
    return (prepare_task_data(train_imgs, cfg.task, spec, cfg.seed),
            prepare_task_data(val_imgs, cfg.task, spec, cfg.seed + 1000))
