"""Numba vs numpy kernels, per call and end to end.

    python benchmarks/bench_kernels.py [--repeats 2000] [--context 40 200 800]

The end-to-end row times one online pass (2,000-example synthetic stream)
in a fresh interpreter per backend, selected by SPANBANDIT_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from spanbandit import _kernels
from spanbandit.dataset import Example, Span
from spanbandit.policy import LinearSpanPolicy

E2E = """
import time
from spanbandit import _kernels
from spanbandit.dataset import SynthSpec, synth_task
from spanbandit.feedback import RewardConfig
from spanbandit.learner import LearnerConfig, run_online
from spanbandit.policy import LinearSpanPolicy
stream = synth_task(SynthSpec(n_examples=2000, seed=1))
ev = synth_task(SynthSpec(n_examples=200, seed=2))
p = LinearSpanPolicy()
run_online(p, stream.subset(range(50)), RewardConfig(), LearnerConfig(), ev.subset(range(5)))  # warm up / jit
t = time.perf_counter()
run_online(p, stream, RewardConfig(), LearnerConfig(), ev)
print(_kernels.USING_NUMBA, time.perf_counter() - t)
"""


def _timeit(fn, repeats):
    fn()  # compile / warm caches
    t = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t) / repeats * 1e6


def kernel_rows(n_ctx, repeats):
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(500)]
    ctx = tuple(words[k] for k in rng.integers(0, 500, size=n_ctx))
    ex = Example("b", tuple(ctx[:5]), ctx, Span(0, 0))
    policy = LinearSpanPolicy()
    policy.params = rng.normal(size=policy.params.shape)
    f = policy.featurize(ex)
    w = policy.params
    coef = rng.normal(size=n_ctx)
    out = np.zeros_like(w)
    ls, le = policy.distributions(ex)
    rows = []
    for name, k in (("numpy", _kernels.NUMPY_KERNELS), ("numba", _kernels.NUMBA_KERNELS)):
        if k is None:
            continue
        rows.append(
            (
                name,
                _timeit(lambda: k.csr_rowdot(f.indptr, f.indices, f.values, f.rows, w, 0), repeats),
                _timeit(lambda: k.csr_scatter_add(f.indptr, f.indices, f.values, f.rows, coef, out, 0), repeats),
                _timeit(lambda: k.best_span(ls, le, 30), repeats),
            )
        )
    return rows


def end_to_end():
    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, SPANBANDIT_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        using, seconds = res.stdout.split()
        results["numba" if using == "True" else "numpy"] = float(seconds)
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=2000)
    ap.add_argument("--context", type=int, nargs="+", default=[40, 200, 800])
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    print(f"{'context':>8} {'backend':>8} {'rowdot us':>10} {'scatter us':>11} {'best_span us':>13}")
    for n in args.context:
        for name, a, b, c in kernel_rows(n, args.repeats):
            print(f"{n:>8} {name:>8} {a:>10.1f} {b:>11.1f} {c:>13.1f}")
    if not args.skip_e2e:
        e2e = end_to_end()
        print()
        for name, sec in e2e.items():
            print(f"online pass, 2000 examples, {name}: {sec:.2f} s")
        if len(e2e) == 2:
            print(f"speedup: {e2e['numpy'] / e2e['numba']:.2f}x")


if __name__ == "__main__":
    main()
