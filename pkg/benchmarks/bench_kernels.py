"""Time the compiled and numpy kernel backends side by side.

    python3 benchmarks/bench_kernels.py [--size 256] [--L 72] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from lapar import kernels
from lapar.dictionary import build_dictionary, preset_config


def cases(mod, size, L, rng):
    img = rng.random((size, size))
    d = build_dictionary(preset_config(str(L))) if L in (14, 24, 72) else None
    dmat = d.as_matrix if d is not None else rng.random((L, 25))
    patches = np.ascontiguousarray(mod.reflect_patches(img, 5))
    phi = rng.random((size * size, L))
    feat = rng.random((1, 16, size // 2, size // 2)).astype(np.float32)
    cols = mod.im2col(feat, 3, 3, 1, 1)
    return {
        "reflect_patches": lambda: mod.reflect_patches(img, 5),
        "pixelwise_apply": lambda: mod.pixelwise_apply(patches, phi, dmat),
        "filter_bank(GEMM)": lambda: kernels.filter_bank(img[None], dmat.reshape(L, 5, 5),
                                                         patch_fn=mod.reflect_patches),
        "im2col 16ch 3x3": lambda: mod.im2col(feat, 3, 3, 1, 1),
        "col2im 16ch 3x3": lambda: mod.col2im(cols, feat.shape, 3, 3, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--L", type=int, default=72)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.backends()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    print(f"image {args.size}x{args.size}, L={args.L}, best of {args.repeat}")
    results = {}
    for name, mod in backends.items():
        for case, fn in cases(mod, args.size, args.L, np.random.default_rng(0)).items():
            fn()
            results.setdefault(case, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    names = list(backends)
    print(f"{'kernel':22s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for case, row in results.items():
        line = f"{case:22s}" + "".join(f"{row[n] * 1e3:10.2f}ms" for n in names)
        if "python" in row and len(names) > 1:
            other = next(n for n in names if n != "python")
            line += f"{row['python'] / row[other]:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
