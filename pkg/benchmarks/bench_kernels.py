"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 256] [--repeat 200] [--steps 300]

Kernels are timed in-process (both tables are importable regardless of
VBDA_BACKEND). The end-to-end number runs a short training job in a
subprocess per backend, since the backend is fixed at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vbda._kernels import numba_kernels, numpy_kernels

TRAIN_SNIPPET = """
import time
from vbda.data import SyntheticSpec, generate
from vbda.training import TrainConfig, train
pair = generate(SyntheticSpec())
cfg = TrainConfig(steps={steps}, eval_every={steps})
train(TrainConfig(steps=2, eval_every=2), pair)  # compile outside the timing
t0 = time.perf_counter()
train(cfg, pair)
print(time.perf_counter() - t0)
"""


def kernel_cases(rows: int):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(rows, 10))
    probs = numpy_kernels.softmax_rows(logits)
    upstream = rng.normal(size=(rows, 10))
    labels = rng.integers(0, 10, rows)
    mu, log_var = rng.normal(size=(2, rows, 16))
    p, g = rng.normal(size=(2, 64 * 64))
    return {
        "softmax_rows": lambda k: k.softmax_rows(logits),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(probs, upstream),
        "sigmoid": lambda k: k.sigmoid(logits),
        "gaussian_kl_rows": lambda k: k.gaussian_kl_rows(mu, log_var),
        "nll_rows": lambda k: k.nll_rows(probs, labels),
        "adam_update": lambda k: k.adam_update(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                               1e-3, 0.9, 0.999, 1e-8, 1),
    }


def time_training(backend: str, steps: int) -> float:
    env = dict(os.environ, VBDA_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=300, help="training steps for the end-to-end timing (0 skips)")
    args = ap.parse_args(argv)

    if numba_kernels is None:
        print("numba is not installed; only the numpy path is available")
        return 1
    print(f"{'kernel':<24}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call in kernel_cases(args.rows).items():
        call(numba_kernels)  # trigger compilation
        t_np = min(timeit.repeat(lambda: call(numpy_kernels), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: call(numba_kernels), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<24}{t_np * 1e6:>12.2f}{t_nb * 1e6:>12.2f}{t_np / t_nb:>10.2f}")

    if args.steps:
        t_np = time_training("numpy", args.steps)
        t_nb = time_training("numba", args.steps)
        print(f"\ntrain {args.steps} steps: numpy {t_np:.2f}s  numba {t_nb:.2f}s  speedup {t_np / t_nb:.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
