"""Compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match what the models and the channel actually feed the kernels:
a batch of 64 crops through the first conv, one print strip of the page.
"""
import argparse
import timeit

import numpy as np

from bubbleattack import _fallback

try:
    from bubbleattack import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(64, 1, 40, 50)).astype(np.float32)
    cols = _fallback.im2col(x, 5, 5, 1)
    act = rng.normal(size=(64, 16, 36, 46)).astype(np.float32)
    pooled, idx = _fallback.maxpool2_forward(act)
    g = rng.normal(size=pooled.shape).astype(np.float32)
    big = rng.normal(size=200_000)
    strip = rng.uniform(size=(64 * 6, 1700 * 6))
    raster = (rng.uniform(size=(384, 10200)) < 0.5).astype(np.uint8)
    return {
        "im2col 64x1x40x50 k5": lambda m: m.im2col(x, 5, 5, 1),
        "col2im 64x1x40x50 k5": lambda m: m.col2im(cols, 40, 50, 1),
        "maxpool2 fwd 64x16x36x46": lambda m: m.maxpool2_forward(act),
        "maxpool2 bwd 64x16x36x46": lambda m: m.maxpool2_backward(g, idx),
        "round_reduced 200k": lambda m: m.round_reduced(big),
        "error_diffusion 384x10200": lambda m: m.error_diffusion(strip, None, 0),
        "box_downsample 384x10200 /6": lambda m: m.box_downsample(raster, 6),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = [("python", _fallback)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n, _ in backends) + ("     speedup" if _kernels else ""))
    for name, fn in cases().items():
        best = []
        for _, mod in backends:
            fn(mod)  # warm up
            best.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{name:32s}" + "".join(f"{t * 1000:10.1f}ms" for t in best)
        if _kernels:
            row += f"{best[0] / best[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
