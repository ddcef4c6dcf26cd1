"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py --steps 200000 --repeat 3
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cmdpgrad import io as cio
from cmdpgrad import policy as pol
from cmdpgrad._backend import available_backends, get_kernels
from cmdpgrad.estimators import wd_infinite_horizon
from cmdpgrad.mdp import Simulator


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    model = cio.load_model("estimation")
    theta = model.flat_theta(cio.load_theta("estimation"))
    alpha = pol.alpha_from_theta_table(theta, model.action_counts)
    backends = available_backends()
    results = {}
    for name in backends:
        k = get_kernels(name)

        def sim():
            return Simulator(model, theta, np.random.default_rng(args.seed), x0=0, backend=k).run(args.steps)

        def wd():
            return wd_infinite_horizon(model, alpha, args.steps, args.seed, x0=0, backend=k).values

        t_sim, s_out = best_of(sim, args.repeat)
        t_wd, w_out = best_of(wd, args.repeat)
        results[name] = (t_sim, t_wd, s_out, w_out)
        print(f"{name:7s} simulate {args.steps} steps: {t_sim:8.4f} s   phantom estimator: {t_wd:8.4f} s")
    if len(results) == 2:
        (sp, wp, s_p, w_p), (sc, wc, s_c, w_c) = results["python"], results["cython"]
        same = all(np.array_equal(a, b) for a, b in zip(s_p, s_c)) and np.array_equal(w_p, w_c)
        print(f"speed-up: simulate {sp / sc:6.1f}x   phantom estimator {wp / wc:6.1f}x   identical output: {same}")
    else:
        print("compiled extension not built; only the Python kernels were timed")


if __name__ == "__main__":
    main()
