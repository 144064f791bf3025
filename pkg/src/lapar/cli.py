"""Command-line entry point: ``lapar <subcommand> ...``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("lapar")

DTYPES = {"f32": np.float32, "f64": np.float64}


class CliError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

class Outputs:
    """Tracks files a command writes so they can be removed if it fails."""

    def __init__(self):
        self.paths = []

    @contextlib.contextmanager
    def atomic(self, path):
        """Yield a temporary path in the target directory; rename on success."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
        os.close(fd)
        try:
            yield Path(tmp)
            os.replace(tmp, path)
            self.paths.append(path)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)

    def track(self, path):
        self.paths.append(Path(path))

    def remove_all(self):
        for p in reversed(self.paths):
            with contextlib.suppress(OSError):
                if p.is_dir():
                    shutil.rmtree(p)
                else:
                    p.unlink()


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_sidecar(outputs: Outputs, target, resolved: dict) -> Path:
    side = Path(str(target) + ".resolved.json")
    with outputs.atomic(side) as tmp:
        tmp.write_text(json.dumps(resolved, indent=2, sort_keys=True, default=_json_default) + "\n")
    return side


def resolve_dictionary(ref: str, seed: int = 0):
    """A preset name ("72", "24", "14"), ``random:L`` / ``random:L:seed``,
    a dictionary YAML config, or a binary dictionary file."""
    from lapar import dictionary as dic

    if ref in ("72", "24", "14"):
        return dic.build_dictionary(dic.preset_config(ref))
    if ref.startswith("random:"):
        parts = ref.split(":")
        L = int(parts[1])
        s = int(parts[2]) if len(parts) > 2 else seed
        return dic.random_dictionary(s, L)
    p = Path(ref)
    if not p.exists():
        raise CliError(f"dictionary {ref!r} is neither a preset nor an existing file")
    if p.suffix in (".yaml", ".yml"):
        return dic.build_dictionary(dic.DictionaryConfig.load(p))
    return dic.load_dictionary(p)


def load_model(path, dtype):
    from lapar import net

    meta, _ = net.load_raw(path)
    model = net.load(path)
    return model.astype(dtype), meta


def load_image_dir(path, gray: bool = False) -> list:
    from lapar.imaging import load_image

    p = Path(path)
    if p.is_file():
        return [(p.stem, load_image(p, gray))]
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp"))
    if not files:
        raise CliError(f"no images found in {p}")
    return [(f.stem, load_image(f, gray)) for f in files]


def clean_images(args, channels: int) -> list:
    """(names, images): either a directory of clean images or a synthetic set."""
    from lapar.synthetic import synthetic_set

    if args.set:
        items = load_image_dir(args.set, gray=channels == 1)
        return [n for n, _ in items], [im for _, im in items]
    imgs = synthetic_set(args.synthetic, args.seed, args.size, channels)
    return [f"synthetic{i}" for i in range(len(imgs))], imgs


# -- subcommands -------------------------------------------------------------

def cmd_build_dict(args, out: Outputs) -> dict:
    from lapar import dictionary as dic

    if args.random:
        d = dic.random_dictionary(args.seed, args.random)
        resolved = {"random": {"L": args.random, "k": 5, "seed": args.seed}}
    else:
        cfg = dic.DictionaryConfig.load(args.config) if args.config else dic.preset_config(args.preset)
        d = dic.build_dictionary(cfg)
        resolved = cfg.to_dict()
    with out.atomic(args.out) as tmp:
        dic.save_dictionary(d, tmp)
    if args.export_png:
        out.track(args.export_png)
        dic.export_filters(d, args.export_png)
    print(f"wrote {args.out}: {d.name}, L={d.L}, k={d.k}")
    return {"target": args.out, "config": resolved}


def cmd_train(args, out: Outputs) -> dict:
    from lapar import train as tr

    cfg = tr.TrainConfig.load(args.config) if args.config else tr.TrainConfig()
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.iters:
        overrides["total_iters"] = args.iters
    if args.seed_given:
        overrides["seed"] = args.seed
    if args.precision_given:
        overrides["precision"] = args.precision
    if overrides:
        cfg = tr.TrainConfig(**{**cfg.__dict__, **overrides})
    if not cfg.out_dir:
        raise CliError("train needs an output directory (--out or out_dir in the config)")
    d = resolve_dictionary(cfg.dictionary, cfg.seed)
    data, val = tr.toy_datasets(cfg)
    fresh = not Path(cfg.out_dir).exists()
    if fresh and not args.resume:
        out.track(cfg.out_dir)
    t0 = time.perf_counter()
    result = tr.train(cfg, data, d, val=val, resume_from=args.resume)
    elapsed = time.perf_counter() - t0
    final = Path(cfg.out_dir) / "final.lpar"
    with out.atomic(final) as tmp:
        tr.save_training_checkpoint(tmp, result.model, result.adam, cfg.total_iters, cfg)
    val_db = tr.validate(result.model, d, val)
    print(f"trained {cfg.total_iters} iterations in {elapsed:.1f}s; final loss "
          f"{result.losses[-1]:.6f}; validation {val_db:.3f} dB; checkpoint {final}")
    return {"target": final, "config": cfg.to_dict()}


def _restore_cmd(args, out: Outputs, task: str) -> dict:
    from lapar.assembly import timing_report
    from lapar.imaging import load_image, save_image, simulate_blocking
    from lapar.pipeline import restore

    dtype = DTYPES[args.precision]
    model, _ = load_model(args.model, dtype)
    if model.config.task != task:
        raise CliError(f"checkpoint was trained for {model.config.task!r}, not {task!r}")
    if task == "sr" and args.scale is not None and args.scale != model.config.scale:
        raise CliError(f"--scale {args.scale} does not match the checkpoint scale {model.config.scale}")
    d = resolve_dictionary(args.dict, args.seed)
    img = load_image(args.input, gray=model.config.in_channels == 1)
    resolved = {"task": task, "model": str(args.model), "dict": args.dict, "input": str(args.input),
                "path": args.path, "precision": args.precision, "seed": args.seed,
                "model_config": model.config.to_dict()}
    if task == "deblock" and args.quality is not None:
        img = simulate_blocking(img, args.quality, seed=args.seed)
        resolved["simulated_quality"] = args.quality
    timings = {}
    result = restore(model, d, img, path=args.path, timings=timings, dtype=dtype)
    with out.atomic(args.out) as tmp:
        save_image(result, tmp)
    print(f"wrote {args.out} ({result.width}x{result.height})")
    print(timing_report(timings))
    return {"target": args.out, "config": resolved}


def cmd_sr(args, out):
    return _restore_cmd(args, out, "sr")


def cmd_denoise(args, out):
    return _restore_cmd(args, out, "denoise")


def cmd_deblock(args, out):
    return _restore_cmd(args, out, "deblock")


def cmd_eval(args, out: Outputs) -> dict:
    from lapar.metrics import border_for, evaluate, image_metrics, summary_table, write_table
    from lapar.train import prepare_task_data

    resolved = {"task": args.task, "scale": args.scale, "set": args.set, "synthetic": args.synthetic,
                "seed": args.seed, "path": args.path}
    if args.pred:
        refs = dict(load_image_dir(args.set))
        preds = dict(load_image_dir(args.pred))
        missing = sorted(set(refs) - set(preds))
        if missing:
            raise CliError(f"no prediction for {missing}")
        border = border_for(args.task, args.scale)
        rows = []
        for name in sorted(refs):
            r = image_metrics(name, preds[name], refs[name], border)
            rows.append({"method": "pred", "image": r.name, "psnr": r.psnr_db, "ssim": r.ssim,
                         "channel": r.channel, "border": border})
        resolved["pred"] = args.pred
    else:
        dtype = DTYPES[args.precision]
        model = None
        if args.model:
            model, _ = load_model(args.model, dtype)
            if model.config.task != args.task:
                raise CliError(f"checkpoint was trained for {model.config.task!r}, not {args.task!r}")
        scale = model.config.scale if model else (args.scale if args.task == "sr" else 1)
        channels = model.config.in_channels if model else 3
        _, imgs = clean_images(args, channels)
        spec = {"scale": scale, "noise_range": (args.noise, args.noise),
                "quality_range": (args.quality, args.quality)}
        data = prepare_task_data(imgs, args.task, spec, args.seed)
        d = resolve_dictionary(args.dict, args.seed) if model else None
        rows = evaluate(model, d, data.pairs, args.task, path=args.path, set_name=args.set_name)
        resolved.update({"model": args.model, "dict": args.dict, "noise": args.noise, "quality": args.quality})
    with out.atomic(args.out) as tmp:
        write_table(rows, tmp)
    for r in summary_table(rows, args.set_name) if not args.pred else []:
        print("\t".join(str(v) for v in r.values()))
    if args.pred:
        print(f"mean PSNR {np.mean([r['psnr'] for r in rows]):.3f} dB")
    return {"target": args.out, "config": resolved}


def cmd_ablate(args, out: Outputs) -> dict:
    from lapar.oracle import ablation_report, write_ablation
    from lapar.train import prepare_task_data

    dicts = [resolve_dictionary(ref, args.seed) for ref in args.dicts]
    _, imgs = clean_images(args, 3)
    data = prepare_task_data(imgs, "sr", {"scale": args.scale}, args.seed)
    rows = ablation_report(dicts, data.pairs, args.scale, args.window, args.ridge_lambda)
    with out.atomic(args.out) as tmp:
        write_ablation(rows, tmp)
    for r in rows:
        print(f"{r['dictionary']}\t{r['L']}\t{r['psnr_db']:.3f}\t{r['mean_residual']:.3e}")
    return {"target": args.out, "config": {"dicts": args.dicts, "set": args.set, "synthetic": args.synthetic,
                                           "scale": args.scale, "window": args.window,
                                           "ridge_lambda": args.ridge_lambda, "seed": args.seed}}


def cmd_report(args, out: Outputs) -> dict:
    import yaml
    from lapar import net
    from lapar.metrics import write_table

    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        models = raw.get("models", [])
        size = raw.get("output_size", args.size)
    else:
        models = [{"preset": p, "scale": s} for s in args.scales for p in args.presets]
        size = args.size
    h, w = (int(v) for v in str(size).lower().split("x"))
    rows = []
    for m in models:
        m = dict(m)
        preset = m.pop("preset", None)
        cfg = net.ModelConfig.preset(preset, **m) if preset else net.ModelConfig(**m)
        rows.append({"model": cfg.label(), "scale": cfg.scale, "params": net.count_params(cfg),
                     "multiadds_G": round(net.count_multiadds(cfg, h, w) / 1e9, 2),
                     "multiadds_net_G": round(net.count_multiadds(cfg, h, w, include_filtering=False) / 1e9, 2)})
    rows.sort(key=lambda r: (r["scale"], -r["params"]))
    with out.atomic(args.out) as tmp:
        write_table(rows, tmp)
    for r in rows:
        print("\t".join(str(v) for v in r.values()))
    return {"target": args.out, "config": {"models": models, "output_size": f"{h}x{w}"}}


def cmd_inspect(args, out: Outputs) -> dict:
    from lapar import net
    from lapar.dictionary import load_dictionary

    head = Path(args.path).read_bytes()[:4]
    if head == b"LDIC":
        d = load_dictionary(args.path)
        m = d.as_matrix
        print(f"dictionary {d.name}: L={d.L} k={d.k} rank={np.linalg.matrix_rank(m)}")
        print(f"row sums in [{m.sum(1).min():.12f}, {m.sum(1).max():.12f}]")
        for i, lab in enumerate(d.labels()):
            print(f"{i:3d} {lab}")
    elif head == b"LPAR":
        meta, tensors = net.load_raw(args.path)
        print(json.dumps(meta, indent=2, sort_keys=True))
        total = 0
        for name, arr in tensors.items():
            print(f"{name:40s} {tuple(arr.shape)}")
            if not name.startswith("adam."):
                total += arr.size
        print(f"model parameters: {total}")
    else:
        raise CliError(f"{args.path}: unrecognized file (expected a dictionary or checkpoint)")
    return {}


# -- parser ------------------------------------------------------------------

def _add_image_set(p, default_count=10):
    p.add_argument("--set", help="directory of clean images (default: a synthetic set)")
    p.add_argument("--synthetic", type=int, default=default_count, help="synthetic image count")
    p.add_argument("--size", type=int, default=96, help="synthetic image size")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lapar", description="Pixel-adaptive regression over a fixed filter dictionary.")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("--precision", choices=sorted(DTYPES), default=None, help="float precision (default f32)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-dict", help="build and save a filter dictionary")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--config", help="dictionary YAML config")
    src.add_argument("--preset", choices=["72", "24", "14"], default="72")
    src.add_argument("--random", type=int, metavar="L", help="random dictionary with L rows")
    s.add_argument("--out", required=True)
    s.add_argument("--export-png", metavar="DIR", help="also write per-filter PNGs and a montage")
    s.set_defaults(func=cmd_build_dict)

    s = sub.add_parser("train", help="train a coefficient network on synthetic data")
    s.add_argument("--config", help="training YAML config")
    s.add_argument("--out", help="output directory (overrides the config)")
    s.add_argument("--iters", type=int, help="override total iterations")
    s.add_argument("--resume", help="training checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    for name, func in (("sr", cmd_sr), ("denoise", cmd_denoise), ("deblock", cmd_deblock)):
        s = sub.add_parser(name, help=f"run the {name} pipeline on one image")
        s.add_argument("--model", required=True)
        s.add_argument("--dict", required=True, help="dictionary file, YAML config or preset name")
        s.add_argument("--in", dest="input", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--path", choices=["pixelwise", "basisconv"], default="basisconv")
        if name == "sr":
            s.add_argument("--scale", type=int)
        if name == "deblock":
            s.add_argument("--quality", type=int,
                           help="apply simulated blocking at this quality first (omit for already-compressed input)")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="PSNR/SSIM table against a clean set")
    s.add_argument("--model", help="checkpoint (omit for the baseline only)")
    s.add_argument("--dict", default="14")
    s.add_argument("--task", choices=["sr", "denoise", "deblock"], default="sr")
    s.add_argument("--scale", type=int, default=2)
    s.add_argument("--noise", type=float, default=35.0, help="denoise sigma in 0-255 units")
    s.add_argument("--quality", type=int, default=30, help="deblock quality")
    s.add_argument("--pred", help="directory of predictions to score against --set (same file stems)")
    s.add_argument("--path", choices=["pixelwise", "basisconv"], default="basisconv")
    s.add_argument("--set-name", default="test")
    s.add_argument("--out", required=True)
    _add_image_set(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="oracle PSNR for several dictionaries")
    s.add_argument("--dicts", nargs="+", default=["72", "random:72", "random:14"])
    s.add_argument("--scale", type=int, default=2)
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--ridge-lambda", type=float, default=1e-4)
    s.add_argument("--out", required=True)
    _add_image_set(s)
    s.set_defaults(func=cmd_ablate, size=48)

    s = sub.add_parser("report", help="parameter and multiply-add counts")
    s.add_argument("--config", help="YAML with a 'models' list and optional 'output_size'")
    s.add_argument("--presets", nargs="+", default=["A", "B", "C"])
    s.add_argument("--scales", nargs="+", type=int, default=[2])
    s.add_argument("--size", default="720x1280", help="HR output size HxW")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("inspect", help="describe a dictionary or checkpoint file")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    args.precision_given = args.precision is not None
    args.seed = 0 if args.seed is None else args.seed
    args.precision = args.precision or "f32"
    out = Outputs()
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            info = args.func(args, out)
            if info.get("target"):
                resolved = {"command": args.command, "seed": args.seed, "precision": args.precision,
                            "threads": args.threads, **info["config"]}
                write_sidecar(out, info["target"], resolved)
    except (CliError, ValueError, OSError, KeyError) as exc:
        out.remove_all()
        print(f"lapar {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BaseException:
        out.remove_all()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
