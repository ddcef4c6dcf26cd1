"""Command-line front end.

Every subcommand writes ``<out-dir>/<name>.csv`` plus a ``.meta.json``
sidecar (config hash, seed, package version) and prints a short summary.
Exit codes: 0 success, 1 validation error, 2 numerical error, 3 statistical
power warning escalated by ``--strict``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import estimators as est
from . import io as cio
from . import lp as lpmod
from . import optimize as opt
from . import policy as pol
from . import wireless as wl
from ._backend import BACKEND, get_kernels
from .mdp import ModelError, NumericalError, UnichainError, analyze, exact_gradient, exact_psi_gradient

OUT_ENV = "CMDPGRAD_OUT"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_POWER = 0, 1, 2, 3

log = logging.getLogger("cmdpgrad")


class PowerWarningEscalated(Exception):
    pass


# ----------------------------------------------------------------------------- output

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def write_csv(args, name: str, header, rows, extra_meta=None) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir")}
    meta = {"command": args.command, "seed": getattr(args, "seed", None), "version": __version__,
            "config_hash": cio.config_hash(settings), "settings": settings, "backend": BACKEND}
    if extra_meta:
        meta.update(extra_meta)
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _kern(name):
    return None if not name else get_kernels(name)


def _labels(model):
    return [f"({i},{p})" for i, p in pol.component_labels(model.action_counts)]


def _pair_labels(model):
    return [f"({i},{a})" for i, a in zip(model.pair_state, model.pair_action)]


def _policy_from_model_file(args, model):
    theta = None
    if args.theta:
        theta = np.asarray(json.loads(args.theta), dtype=float)
    else:
        theta = cio.load_theta(args.model)
    if theta is None:
        raise cio.ConfigError("no policy given: use --theta or a model file with a 'theta' entry")
    theta = model.flat_theta(theta)
    return theta, pol.alpha_from_theta_table(theta, model.action_counts)


def _check_power(args, ok: bool, message: str):
    if ok:
        return
    warnings.warn(message, est.StatisticalPowerWarning)
    if args.strict:
        raise PowerWarningEscalated(message)


# ----------------------------------------------------------------------------- commands

def cmd_eval(args) -> int:
    model = cio.load_model(args.model)
    theta, alpha = _policy_from_model_file(args, model)
    ex = analyze(model, theta)
    g = exact_gradient(model, alpha)
    gpsi = exact_psi_gradient(model, theta)
    rows = [("value", "C", "", ex.values[0])]
    rows += [("value", f"B{l + 1}", "", v) for l, v in enumerate(ex.values[1:])]
    rows += [("pi", lab, "", v) for lab, v in zip(_pair_labels(model), ex.pi)]
    names = ["C"] + [f"B{l + 1}" for l in range(model.num_constraints)]
    for k, nm in enumerate(names):
        rows += [("grad_alpha", nm, lab, v) for lab, v in zip(_labels(model), g[k])]
        rows += [("grad_psi", nm, lab, v) for lab, v in zip(_pair_labels(model), gpsi[k])]
    write_csv(args, "eval", ("kind", "objective", "component", "value"), rows)
    print(f"C = {ex.values[0]:.6f}")
    for l, v in enumerate(ex.values[1:]):
        print(f"B{l + 1} = {v:.6f}")
    print("grad_alpha C =", np.array2string(g[0], precision=4))
    print("grad_psi   C =", np.array2string(gpsi[0], precision=4))
    return EXIT_OK


def _replicate_one(job):
    model, policy, N, coords, gamma_mode, seed_seq, backend = job
    rng = np.random.default_rng(seed_seq)
    return est.wd_infinite_horizon(model, policy, N, rng, gamma_mode, coords=coords,
                                   backend=_kern(backend)).values[0]


def _replications(args, model, policy, N, coords, seed_seq):
    jobs = [(model, policy, N, coords, args.gamma_mode, s, args.backend) for s in seed_seq.spawn(args.replications)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            return np.array(list(pool.map(_replicate_one, jobs)))
    return np.array([_replicate_one(j) for j in jobs])


def cmd_grad(args) -> int:
    if args.replications < 1:
        raise cio.ConfigError("replications must be >= 1")
    _check_power(args, args.replications >= 30, f"{args.replications} replications give unreliable CIs")
    model = cio.load_model(args.model)
    theta, alpha = _policy_from_model_file(args, model)
    exact = {"alpha": exact_gradient(model, alpha)[0], "psi": exact_psi_gradient(model, theta)[0]}
    labels = {"alpha": _labels(model), "psi": _pair_labels(model)}
    coords = ("alpha", "psi") if args.coords == "both" else (args.coords,)
    rows, timing = [], {}
    for ci, c in enumerate(coords):
        for ni, N in enumerate(args.batch_size):
            seq = np.random.SeedSequence(args.seed, spawn_key=(ci, ni))
            t0 = time.perf_counter()
            samples = _replications(args, model, alpha if c == "alpha" else theta, N, c, seq)
            timing[f"{c}:{N}"] = time.perf_counter() - t0
            mean, var, half = est.summarize(samples)
            covered = np.abs(mean - exact[c]) <= half
            for k, lab in enumerate(labels[c]):
                rows.append((c, N, lab, exact[c][k], mean[k], half[k], var[k], int(covered[k])))
            print(f"{c} N={N}: {int(covered.sum())}/{covered.size} CIs contain the exact value "
                  f"({timing[f'{c}:{N}']:.1f}s)")
            for k, lab in enumerate(labels[c]):
                print(f"  {lab:8s} exact {exact[c][k]:10.3f}  est {mean[k]:10.3f} +- {half[k]:7.3f}  var {var[k]:9.3f}")
    write_csv(args, "grad", ("coords", "N", "component", "exact", "mean", "half_width", "variance", "covered"),
              rows, {"seconds": timing})
    return EXIT_OK


def cmd_compare_sf(args) -> int:
    if args.replications < 2 or args.sf_batches < 2:
        raise cio.ConfigError("need at least 2 replications and 2 SF batches")
    model = cio.load_model(args.model)
    theta, _ = _policy_from_model_file(args, model)
    N = args.batch_size
    seq_wd, seq_sf = np.random.SeedSequence(args.seed).spawn(2)
    t0 = time.perf_counter()
    wd = _replications(args, model, theta, N, "psi", seq_wd)
    t_wd = time.perf_counter() - t0
    t0 = time.perf_counter()
    sf = est.score_function_gradient(model, theta, N, np.random.default_rng(seq_sf), n_batches=args.sf_batches,
                                     backend=_kern(args.backend), return_batches=True)[:, 0, :]
    t_sf = time.perf_counter() - t0
    wm, wv, wh = est.summarize(wd)
    sm, sv, sh = est.summarize(sf)
    exact = exact_psi_gradient(model, theta)[0]
    ratio = sv / wv
    rows = [(lab, exact[k], wm[k], wh[k], wv[k], sm[k], sh[k], sv[k], ratio[k])
            for k, lab in enumerate(_pair_labels(model))]
    write_csv(args, "compare_sf", ("component", "exact", "wd_mean", "wd_half_width", "wd_variance",
                                   "sf_mean", "sf_half_width", "sf_variance", "variance_ratio"),
              rows, {"cpu_seconds": {"wd": t_wd, "sf": t_sf}})
    print(f"N={N}: WD {args.replications} replications in {t_wd:.2f}s, SF {args.sf_batches} batches in {t_sf:.2f}s")
    for r in rows:
        print(f"  {r[0]:8s} var WD {r[4]:9.3f}  var SF {r[7]:12.1f}  ratio {r[8]:10.1f}")
    print(f"minimum variance ratio {ratio.min():.1f}")
    return EXIT_OK


def cmd_bias(args) -> int:
    _check_power(args, args.replications >= 100, f"{args.replications} replications give a weak bias test")
    model = cio.load_model(args.model)
    theta, alpha = _policy_from_model_file(args, model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", est.StatisticalPowerWarning)
        rep = est.measure_bias_and_kappa(model, alpha, args.batch_sizes, args.replications, args.seed,
                                         backend=_kern(args.backend))
    rows = []
    for ni, N in enumerate(rep.batch_sizes):
        for k, lab in enumerate(_labels(model)):
            rows.append((int(N), lab, rep.exact_mean[ni, 0, k], rep.exact_se[ni, 0, k],
                         rep.sample_bias[ni, 0, k], rep.sample_se[ni, 0, k], rep.covariance[ni, 0, k]))
    write_csv(args, "bias", ("N", "component", "exact_gamma_bias", "exact_gamma_se", "sample_gamma_bias",
                             "sample_gamma_se", "covariance"), rows, {"slope": rep.slope, "seconds": rep.elapsed})
    for r in rows:
        print(f"  N={r[0]:4d} {r[1]:6s} exact-mode {r[2]:8.3f} (se {r[3]:.3f})  sample-mode {r[4]:8.3f} (se {r[5]:.3f})")
    print(f"log-log slope of |bias| vs N: {rep.slope:.3f}")
    return EXIT_OK


def cmd_lp(args) -> int:
    model = cio.load_model(args.model)
    sol, theta = lpmod.solve_model(model, args.method)
    if not sol.optimal:
        print("LP infeasible: no stationary policy satisfies the constraints")
        write_csv(args, "lp", ("kind", "label", "value"), [("status", "infeasible", float("nan"))])
        return EXIT_NUMERICAL
    rows = [("status", "optimal", 0.0), ("value", "C*", sol.value)]
    rows += [("pi", lab, v) for lab, v in zip(_pair_labels(model), sol.x)]
    rows += [("theta", lab, v) for lab, v in zip(_pair_labels(model), theta)]
    rows += [("dual", f"lambda{l + 1}", v) for l, v in enumerate(sol.duals_ub)]
    write_csv(args, "lp", ("kind", "label", "value"), rows)
    print(f"optimal value {sol.value:.6f}")
    print("theta* =", np.array2string(model.table(theta), precision=4))
    print("duals  =", np.array2string(sol.duals_ub, precision=6))
    return EXIT_OK


def cmd_track(args) -> int:
    sched, hyper, cfg = cio.load_tracking(args.tracking)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    n_batches = args.n_batches or int(cfg.get("n_batches", 1200))
    window = int(cfg.get("window", 100))
    counts = sched.models[0].action_counts
    theta0 = sched.models[0].flat_theta(np.asarray(cfg["theta0"], dtype=float))
    alpha0 = pol.alpha_from_theta_table(theta0, counts)
    optima = [lpmod.solve_model(m)[0].value for m in sched.models]
    deltas = args.delta or [hyper.delta]
    rows = []
    status = EXIT_OK
    L = sched.models[0].num_constraints
    for d in deltas:
        h = opt.Hyper(**{**hyper.__dict__, "delta": d})
        tr = opt.run_adaptive(sched, h, n_batches, alpha0, seed=seed, rule=cfg.get("rule", "primal-dual"),
                              gradients=cfg.get("gradients", "wd"),
                              smoothing_order=cfg.get("smoothing_order", "lagged"), backend=_kern(args.backend))
        for k in range(tr.batch.size):
            rows.append((d, int(tr.batch[k]), int(tr.time[k]), int(tr.regime[k]), tr.cost_estimate[k],
                         tr.exact_cost[k], *tr.B_estimate[k], *tr.lam[k], *tr.theta[k]))
        print(f"delta={d}:")
        for r, opt_val in enumerate(optima):
            if np.any(tr.regime == r):
                fw = tr.final_window(r, window)
                print(f"  regime {r}: final-window cost {fw:9.3f}  LP optimum {opt_val:9.3f}  "
                      f"rel. gap {abs(fw - opt_val) / abs(opt_val):.3f}")
        if tr.error:
            print(f"  run stopped early: {tr.error}")
            status = EXIT_NUMERICAL
    header = ("delta", "batch", "time", "regime", "cost_estimate", "exact_cost",
              *[f"B{l + 1}_hat" for l in range(L)], *[f"lambda{l + 1}" for l in range(L)],
              *[f"theta{lab}" for lab in _pair_labels(sched.models[0])])
    write_csv(args, "track", header, rows, {"lp_optima": optima})
    return status


def cmd_wireless(args) -> int:
    model = cio.load_txmodel(args.model)
    st = wl.stability_check(model)
    print(f"stability: {'ok' if st.stable else 'FAILS'}  delta/f_min = {st.lhs:.4f}  1 - gamma/beta_min = {st.rhs:.4f}")
    if not st.stable:
        raise cio.ConfigError(st.message)
    grid = np.logspace(np.log10(args.lambda_min), np.log10(args.lambda_max), args.lambda_points)
    res = wl.calibrate_mixture(model, args.discount, grid)
    p = res.policy
    rows = []
    for c, y in np.ndindex(*p.lower.shape):
        upper = p.upper[c, y] if p.is_mixture else p.lower[c, y]
        q = p.q[c, y] if p.is_mixture else 1.0
        rows.append((c, y, int(p.lower[c, y]), int(upper), q))
    write_csv(args, "wireless", ("channel", "arrival", "b1", "b2", "q"), rows,
              {"cost": res.cost, "delay": res.delay, "lambda_bracket": [res.lam_low, res.lam_high],
               "violations": [list(v) for v in p.violations]})
    viol = len(p.violations)
    print(f"multiplier bracket [{res.lam_low:.4g}, {res.lam_high:.4g}]; monotonicity violations: {viol}")
    for r in rows:
        print(f"  channel {r[0]} arrival {r[1]}: b1 {r[2]:3d}  b2 {r[3]:3d}  q {r[4]:.6f}")
    print(f"mixture cost {res.cost:.6f}  delay {res.delay:.6f}  (bound {model.bound})")
    return EXIT_OK


# ----------------------------------------------------------------------------- parser

def _int_list(text):
    return [int(x) for x in str(text).split(",") if x]


def _float_list(text):
    return [float(x) for x in str(text).split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmdpgrad", description="Constrained MDP gradient estimation and control")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out-dir", default=os.environ.get(OUT_ENV, "results"),
                        help=f"output directory (default ${OUT_ENV} or ./results)")
        sp.add_argument("--config", help="JSON file whose keys override the flags")
        sp.add_argument("--strict", action="store_true", help="treat statistical power warnings as errors")
        sp.add_argument("--backend", choices=("cython", "python"), default=None)
        sp.add_argument("--verbose", action="store_true")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="exact cost, constraints and gradients at a policy")
    common(s, seed=False)
    s.add_argument("--model", default="estimation")
    s.add_argument("--theta", help="policy table as JSON, e.g. '[[0.2,0.6,0.2],[0.4,0.4,0.2]]'")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grad", help="phantom gradient estimates with confidence intervals")
    common(s)
    s.add_argument("--model", default="estimation")
    s.add_argument("--theta")
    s.add_argument("--batch-size", type=_int_list, default=[100, 1000])
    s.add_argument("--replications", type=int, default=100)
    s.add_argument("--coords", choices=("alpha", "psi", "both"), default="both")
    s.add_argument("--gamma-mode", choices=("sample", "exact"), default="sample")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_grad)

    s = sub.add_parser("compare-sf", help="phantom vs score-function variance")
    common(s)
    s.add_argument("--model", default="estimation")
    s.add_argument("--theta")
    s.add_argument("--batch-size", type=int, default=1000)
    s.add_argument("--replications", type=int, default=100)
    s.add_argument("--sf-batches", type=int, default=2000)
    s.add_argument("--gamma-mode", choices=("sample", "exact"), default="sample")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_compare_sf)

    s = sub.add_parser("bias", help="small-batch bias of the fast estimator")
    common(s)
    s.add_argument("--model", default="estimation")
    s.add_argument("--theta")
    s.add_argument("--batch-sizes", type=_int_list, default=[5, 10, 50, 100])
    s.add_argument("--replications", type=int, default=1000)
    s.set_defaults(func=cmd_bias)

    s = sub.add_parser("lp", help="occupation-measure LP optimum")
    common(s, seed=False)
    s.add_argument("--model", default="tracking_a")
    s.add_argument("--method", choices=("auto", "simplex", "highs"), default="auto")
    s.set_defaults(func=cmd_lp)

    s = sub.add_parser("track", help="adaptive control over a model schedule")
    common(s)
    s.set_defaults(seed=None)
    s.add_argument("--tracking", default="tracking", help="tracking config (schedule, theta0, hyperparameters)")
    s.add_argument("--delta", type=_float_list, default=None, help="comma-separated smoothing factors to sweep")
    s.add_argument("--n-batches", type=int, default=None)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("wireless", help="threshold structure and mixture calibration")
    common(s, seed=False)
    s.add_argument("--model", default="wireless")
    s.add_argument("--discount", type=float, default=0.99)
    s.add_argument("--lambda-min", type=float, default=1e-3)
    s.add_argument("--lambda-max", type=float, default=1e2)
    s.add_argument("--lambda-points", type=int, default=61)
    s.set_defaults(func=cmd_wireless)
    return p


def _apply_config(args, parser):
    if not args.config:
        return args
    cfg = cio.load_config(args.config)
    known = vars(args)
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "func", "config"):
            raise cio.ConfigError(f"unknown config key {key!r} for {args.command}")
        setattr(args, dest, val)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = _apply_config(args, parser)
        return args.func(args)
    except PowerWarningEscalated as exc:
        print(f"error: statistical power: {exc}", file=sys.stderr)
        return EXIT_POWER
    except (NumericalError, UnichainError, np.linalg.LinAlgError, est.ExtinctionTimeout) as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (cio.ConfigError, ModelError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
