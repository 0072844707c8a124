"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 50]

Prints one line per kernel with the median time of each backend and the
speedup. Exits with status 1 when the compiled extension is not built.
"""

import argparse
import sys
import timeit

import numpy as np

from emdiff._kernels import compiled_backend, python_backend


def _cases(rng):
    x = rng.standard_normal((128, 256)).astype(np.float32)
    _, sig = python_backend.silu_forward(x)
    g = rng.standard_normal((128, 256)).astype(np.float32)
    p = rng.standard_normal(256 * 256).astype(np.float32)
    imgs = rng.standard_normal((64, 32, 32)).astype(np.float32)
    k5 = np.full((5, 5), 1 / 25, dtype=np.float32)

    def adamw(mod):
        param, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
        return lambda: mod.adamw_update(param, p, m, v, 1e-3, 0.9, 0.999, 1e-8,
                                        1e-4, 0.1, 0.001)

    def ema(mod):
        shadow = p.copy()
        return lambda: mod.ema_update(shadow, p, 0.999)

    return {
        "silu_forward (128x256)": lambda mod: (lambda: mod.silu_forward(x)),
        "silu_backward (128x256)": lambda mod: (lambda: mod.silu_backward(x, sig, g)),
        "adamw_update (65536)": adamw,
        "ema_update (65536)": ema,
        "circular_conv2d (64x32x32, k=5)": lambda mod: (lambda: mod.circular_conv2d(imgs, k5)),
    }


def _median_time(fn, repeat):
    fn()  # warm up
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    compiled = compiled_backend()
    if compiled is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':36s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, make in _cases(rng).items():
        t_py = _median_time(make(python_backend), args.repeat)
        t_c = _median_time(make(compiled), args.repeat)
        print(f"{name:36s} {t_py * 1e6:12.1f} {t_c * 1e6:12.1f} {t_py / t_c:8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
