"""Time the numpy and compiled kernel backends against each other.

Usage::

    python3 benchmarks/bench_kernels.py [--rows 1600] [--width 512] [--repeat 30]

Prints one line per kernel with the median wall time of each backend and the
speed ratio. Shapes mirror one pretraining step of the default model
(batch 64 x ~25 positions).
"""

import argparse
import statistics
import time

import numpy as np

from steernet.numerics import kernels


def _cases(rows, width, d_model, vocab, rng):
    x = rng.standard_normal((rows, width)).astype(np.float32)
    dy = rng.standard_normal((rows, width)).astype(np.float32)
    h = rng.standard_normal((rows, d_model)).astype(np.float32)
    dh = rng.standard_normal((rows, d_model)).astype(np.float32)
    gain = np.ones(d_model, np.float32)
    bias = np.zeros(d_model, np.float32)
    logits = rng.standard_normal((rows, vocab)).astype(np.float32)
    targets = rng.integers(0, vocab, rows).astype(np.int64)
    _, mean, rstd = kernels.backend_module("python").layer_norm_fwd(h, gain, bias, 1e-5)
    p = rng.standard_normal(width * d_model).astype(np.float32)
    g = rng.standard_normal(p.shape).astype(np.float32)
    return {
        "layer_norm_fwd": lambda: (h, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: (dh, h, mean, rstd, gain),
        "softmax_fwd": lambda: (x,),
        "softmax_bwd": lambda: (x, dy),
        "gelu_fwd": lambda: (x,),
        "gelu_bwd": lambda: (x, dy),
        "xent_fwd": lambda: (logits, targets),
        # fresh moment buffers each call since the update is in place
        "adam_update": lambda: (p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                1e-3, 0.9, 0.98, 1e-8, 0.1, 0.02),
    }


def _median_ms(fn, make_args, repeat):
    fn(*make_args())
    times = []
    for _ in range(repeat):
        args = make_args()
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1600)
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--d-model", type=int, default=128)
    ap.add_argument("--vocab", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args(argv)

    py = kernels.backend_module("python")
    try:
        cy = kernels.backend_module("cython")
    except ImportError:
        print("compiled extension not built; only the numpy backend is available")
        cy = None
    cases = _cases(args.rows, args.width, args.d_model, args.vocab, np.random.default_rng(0))
    print(f"{'kernel':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  active")
    for name, make_args in cases.items():
        t_py = _median_ms(getattr(py, name), make_args, args.repeat)
        active = getattr(kernels, name).__module__.rsplit(".", 1)[-1]
        if cy is None:
            print(f"{name:<16}{t_py:>10.3f}{'-':>11}{'-':>9}  {active}")
            continue
        t_cy = _median_ms(getattr(cy, name), make_args, args.repeat)
        print(f"{name:<16}{t_py:>10.3f}{t_cy:>11.3f}{t_py / t_cy:>8.2f}x  {active}")


if __name__ == "__main__":
    main()
