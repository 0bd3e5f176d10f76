"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--round]

Reports per-call times for each kernel on shapes from the default benchmark
network (32 -> 64 -> 32 -> 10, batch 32), the max absolute difference between
the two backends, and optionally one full training round per backend.
"""

import argparse
import time
import timeit

import numpy as np

from influfl import _backend
from influfl.config import RunConfig
from influfl.orchestration import run_experiment


def kernel_cases(rng, batch=32):
    x = rng.normal(size=(batch, 32))
    w = rng.normal(size=(64, 32)) / 8
    b = rng.normal(size=64)
    logits = rng.normal(size=(batch, 10))
    labels = rng.integers(0, 10, batch).astype(np.int64)
    n = 32 * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10
    p, g = rng.normal(size=n), rng.normal(size=n)

    def forward(k):
        return k.dense_forward(x, w, b, 1)

    def backward(k):
        out = k.dense_forward(x, w, b, 1)
        gw, gb = np.empty_like(w), np.empty_like(b)
        dx = k.dense_backward(np.ones_like(out), out, x, w, 1, gw, gb, True)
        return np.concatenate([gw.ravel(), gb, dx.ravel()])

    def xent(k):
        grad = np.empty_like(logits)
        loss = k.softmax_xent(logits, labels, grad)
        return np.append(grad.ravel(), loss)

    def adam(k):
        q, m, v = p.copy(), np.zeros(n), np.zeros(n)
        for step in range(1, 4):
            k.adam_update(q, g, m, v, 1e-3, 0.9, 0.999, 1e-8, step)
        return q

    return {"dense_forward": forward, "dense_backward": backward, "softmax_xent": xent, "adam_update": adam}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--round", action="store_true", help="also time a 2-round FedC2I run")
    args = parser.parse_args()

    if not _backend.compiled_available():
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    py, cy = _backend.load("python"), _backend.load("compiled")
    cases = kernel_cases(np.random.default_rng(0))

    print(f"{'kernel':16s} {'python us':>10s} {'compiled us':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(py), number=args.repeat, repeat=3)) / args.repeat
        t_cy = min(timeit.repeat(lambda: fn(cy), number=args.repeat, repeat=3)) / args.repeat
        diff = float(np.abs(fn(py) - fn(cy)).max())
        print(f"{name:16s} {1e6 * t_py:10.1f} {1e6 * t_cy:12.1f} {t_py / t_cy:8.2f} {diff:11.1e}")

    if args.round:
        cfg = RunConfig().replace(rounds=2, seeds=(0,))
        for choice in ("python", "compiled"):
            _backend.set_backend(choice)
            start = time.perf_counter()
            run_experiment(cfg, seed=0)
            print(f"2-round FedC2I run, {choice:8s}: {time.perf_counter() - start:.2f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
