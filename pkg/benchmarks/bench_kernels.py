"""Timing comparison of the two kernel backends.

Runs every hot kernel at training-realistic shapes against both the
numba-compiled implementation and the pure-numpy fallback, then (with
--end-to-end) times a small three-stage run per backend in subprocesses,
since MSTD_BACKEND is latched at import time.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 500 --end-to-end
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mstd import kernels_numpy  # noqa: E402

try:
    from mstd import kernels_numba
except ImportError:
    kernels_numba = None


def bench(fn, args, repeats):
    fn(*args)  # warm-up; also triggers JIT compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e6  # microseconds


def cases(rng):
    b, d, c = 256, 64, 4
    x = rng.normal(size=(b, d)).astype(np.float32)
    g = rng.normal(size=(b, d)).astype(np.float32)
    logits = rng.normal(size=(b, c)).astype(np.float32)
    glog = rng.normal(size=(b, c)).astype(np.float32)
    probs = kernels_numpy.softmax_fwd(logits, 1.0)
    labels = rng.integers(0, c, size=b).astype(np.int64)
    pos = rng.uniform(0.01, 1.0, size=(b, c)).astype(np.float32)

    yield "relu_fwd", "relu_fwd", (x,)
    yield "relu_bwd", "relu_bwd", (x, g)
    yield "sigmoid_fwd", "sigmoid_fwd", (x,)
    yield "sigmoid_bwd", "sigmoid_bwd", (kernels_numpy.sigmoid_fwd(x), g)
    yield "softmax_fwd", "softmax_fwd", (logits, 0.5)
    yield "softmax_bwd", "softmax_bwd", (probs, glog, 0.5)
    yield "log_eps_fwd", "log_eps_fwd", (pos, 1e-9)
    yield "log_eps_bwd", "log_eps_bwd", (pos, glog, 1e-9)
    yield "nll_rows", "nll_rows", (probs, labels)

    p = rng.normal(size=(d, d)).astype(np.float32)
    gp = rng.normal(size=(d, d)).astype(np.float32)
    yield "sgd_step", "sgd_step", (p.copy(), gp, 1e-3)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    yield "adam_step", "adam_step", (
        p.copy(), gp, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001,
    )


def run_micro(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, name, args in cases(rng):
        t_np = bench(getattr(kernels_numpy, name), args, repeats)
        if kernels_numba is not None:
            t_nb = bench(getattr(kernels_numba, name), args, repeats)
            rows.append((label, t_np, t_nb, t_np / t_nb))
        else:
            rows.append((label, t_np, float("nan"), float("nan")))

    print(f"{'kernel':14s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, t_np, t_nb, ratio in rows:
        nb = f"{t_nb:10.2f}" if np.isfinite(t_nb) else "       n/a"
        sp = f"{ratio:7.2f}x" if np.isfinite(ratio) else "     n/a"
        print(f"{label:14s} {t_np:10.2f} {nb} {sp}")
    if kernels_numba is None:
        print("\nnumba not importable; only the fallback path was timed")


END_TO_END = """
import time
import mstd.backend as backend
from mstd.config import parse_config
from mstd.pipeline import run_all

cfg = parse_config({
    "data": {"classes": 4, "samples": 600, "dims": [16, 16],
             "informativeness": [1.0, 0.4]},
    "models": {"unimodal_hidden": [[32, 16], [32, 16]],
               "encoder_hidden": [[16], [16]], "fusion_hidden": [32, 16]},
    "plan": {"target": 2},
    "train": {"epochs": {"s1": 8, "s2": 4, "s3": 8}},
})
run_all(cfg, seed=0)  # warm-up run compiles everything
t0 = time.monotonic()
run_all(cfg, seed=1)
print(f"  {backend.BACKEND}: {time.monotonic() - t0:.2f}s")
"""


def run_end_to_end():
    print("\nsmall three-stage run (one warm-up, one timed):")
    for backend in ("numba", "numpy"):
        env = dict(os.environ, MSTD_BACKEND=backend)
        env["PYTHONPATH"] = os.pathsep.join(
            [os.path.join(os.path.dirname(__file__), "..", "src"),
             env.get("PYTHONPATH", "")]
        )
        proc = subprocess.run(
            [sys.executable, "-c", END_TO_END], env=env,
            capture_output=True, text=True,
        )
        if proc.returncode:
            print(f"  {backend}: failed\n{proc.stderr}", file=sys.stderr)
        else:
            print(proc.stdout, end="")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200,
                    help="timing repeats per kernel (median is reported)")
    ap.add_argument("--end-to-end", action="store_true",
                    help="also time a small full run per backend")
    args = ap.parse_args()
    run_micro(args.repeats)
    if args.end_to_end:
        run_end_to_end()


if __name__ == "__main__":
    main()
