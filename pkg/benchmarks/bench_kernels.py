"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes match one training step of the benchmark recipe (256 rays x 32
samples) and one 64x64 segmentation.
"""
import argparse
import timeit

import numpy as np

from prunefield import _kernels_py as py_impl
from prunefield import kernels
from prunefield.segment import _grid_edges


def composite_inputs(rays, samples, dtype, seed=0):
    rng = np.random.default_rng(seed)
    sigma = rng.exponential(2.0, (rays, samples)).astype(dtype)
    delta = np.full((rays, samples), 1.5 / samples, dtype)
    rgb = rng.uniform(size=(rays, samples, 3)).astype(dtype)
    t = np.cumsum(delta, axis=1)
    bg = np.array([0.1, 0.1, 0.15], dtype)
    return sigma, delta, rgb, t, bg


def fh_inputs(size, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(size, size, 3))
    a, b = _grid_edges(size, size)
    flat = img.reshape(-1, 3) * 255
    w = np.sqrt(((flat[a] - flat[b]) ** 2).sum(1))
    o = np.argsort(w, kind="stable")
    return a[o].astype(np.int64), b[o].astype(np.int64), w[o], size * size


def best_ms(fn, repeat):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rays", type=int, default=256)
    ap.add_argument("--samples", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()
    impls = {"python": py_impl}
    if kernels.compiled_impl is not None:
        impls["cython"] = kernels.compiled_impl
    else:
        print("compiled extension not built; timing the fallback only")

    rows = []
    for dtype in (np.float32, np.float64):
        sigma, delta, rgb, t, bg = composite_inputs(args.rays, args.samples, dtype)
        g = np.ones((args.rays, 3), dtype)
        for name, impl in impls.items():
            color, _, tf, w = impl.composite_forward(sigma, delta, rgb, t, bg, 2.5)
            rows.append((f"composite_forward {np.dtype(dtype).name}", name,
                         best_ms(lambda: impl.composite_forward(sigma, delta, rgb, t, bg, 2.5), args.repeat)))
            rows.append((f"composite_backward {np.dtype(dtype).name}", name,
                         best_ms(lambda: impl.composite_backward(sigma, delta, rgb, w, tf, bg, g), args.repeat)))
    a, b, w, n = fh_inputs(args.size)
    for name, impl in impls.items():
        rows.append((f"fh_merge {args.size}x{args.size}", name,
                     best_ms(lambda: impl.fh_merge(a, b, w, n, 100.0, 20), max(3, args.repeat // 4))))

    print(f"{'kernel':<28}{'backend':<10}{'best ms':>10}")
    for kernel, name, ms in rows:
        print(f"{kernel:<28}{name:<10}{ms:>10.3f}")
    if "cython" in impls:
        print()
        by = {(k, n): ms for k, n, ms in rows}
        for kernel in dict.fromkeys(k for k, _, _ in rows):
            print(f"{kernel:<28}speedup {by[(kernel, 'python')] / by[(kernel, 'cython')]:6.2f}x")


if __name__ == "__main__":
    main()
