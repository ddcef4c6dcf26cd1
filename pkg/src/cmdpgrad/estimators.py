"""Weak-derivative phantom gradient estimators and a score-function baseline.

A phantom is spawned at (almost) every step.  It stands for a copy of the
system that took a different action once, and it dies when the nominal chain
first reaches the phantom's target pair.  Its contribution is ``K`` times the
cost difference accumulated up to that hitting time.

Phantoms sharing a target die together, so the kernel keeps per-target
aggregates (sum of ``K`` and of ``K * birth_time``) instead of individual
records.  The estimate is identical; individual records are kept only when
recording is requested.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from ._backend import kernels as _default_kernels
from .mdp import MdpModel, Simulator, analyze, hitting_times

GAMMA_MODES = ("sample", "exact")
DEFAULT_STEP_CAP = 10_000_000


class ExtinctionTimeout(RuntimeError):
    """Living phantoms did not die within the step cap (alpha too close to the boundary)."""


class StatisticalPowerWarning(UserWarning):
    pass


@dataclass
class PhantomRecord:
    """One phantom as seen by the recording ledger."""

    birth_time: int
    component: int
    birth_pair: int
    death_target: int
    k_factor: float
    death_time: int = -1

    @property
    def alive(self) -> bool:
        return self.death_time < 0

    def age(self, now: int) -> int:
        return (self.death_time if self.death_time >= 0 else now) - self.birth_time


@dataclass
class GradientEstimate:
    """Per-component gradient estimates for the cost (row 0) and each constraint."""

    values: np.ndarray
    batch: int = 0
    samples: int = 0
    coords: str = "alpha"
    variance: np.ndarray | None = None
    gamma_hat: np.ndarray | None = None
    batch_mean: np.ndarray | None = None     # sample average of each objective over the batch
    death_weight: np.ndarray | None = None   # per component: sum of K * lifetime over deaths in the batch

    @property
    def cost(self) -> np.ndarray:
        return self.values[0]

    @property
    def constraints(self) -> np.ndarray:
        return self.values[1:]


def _tables_for(model: MdpModel, policy, coords: str) -> pol.PhantomTables:
    if coords == "alpha":
        alpha = policy.alpha if hasattr(policy, "alpha") else np.asarray(policy, dtype=float)
        return pol.spherical_phantom_tables(alpha, model.action_counts)
    if coords == "psi":
        theta = model.flat_theta(policy.theta if hasattr(policy, "theta") else policy)
        return pol.canonical_phantom_tables(theta, model.action_counts)
    raise ValueError(f"unknown coordinates {coords!r}")


def _theta_for(model: MdpModel, policy, coords: str) -> np.ndarray:
    if hasattr(policy, "theta"):
        return model.flat_theta(policy.theta)
    if coords == "alpha":
        return pol.theta_from_alpha(policy, model.action_counts)
    return model.flat_theta(policy)


class PhantomLedger:
    """Living phantoms of one trajectory, aggregated by death target.

    ``ksum[z, q]`` and ``kksum[z, q]`` hold the sums of ``K`` and of
    ``K * birth_time`` over living phantoms with target pair ``z`` that
    belong to local component ``q`` of the target's state.
    """

    def __init__(self, model: MdpModel, tables: pol.PhantomTables, record: bool = False,
                 record_capacity: int = 0, backend=None):
        self.model = model
        self.tables = tables
        n_pairs = model.num_pairs
        width = max(tables.max_local, 1)
        self.ksum = np.zeros((n_pairs, width))
        self.kksum = np.zeros((n_pairs, width))
        self.count = np.zeros(n_pairs, dtype=np.int64)
        self.max_count = np.zeros(n_pairs, dtype=np.int64)
        self.time = 0
        self.kernels = backend if backend is not None else _default_kernels
        self.record = record
        self._rec_n = 0
        self.head = np.full(n_pairs, -1, dtype=np.int64)
        self._alloc(record_capacity if record else 0)
        # flush map: pair z, local q -> global component of z's state
        ps = model.pair_state
        co = tables.comp_offsets
        ncomp_state = np.diff(co)
        zz, qq = np.nonzero(np.arange(width)[None, :] < ncomp_state[ps][:, None])
        self._flush_pairs = zz
        self._flush_local = qq
        self._flush_comp = co[ps[zz]] + qq

    def _alloc(self, cap):
        self.rec_pair = np.zeros(cap, dtype=np.int64)
        self.rec_target = np.zeros(cap, dtype=np.int64)
        self.rec_birth = np.zeros(cap, dtype=np.int64)
        self.rec_death = np.zeros(cap, dtype=np.int64)
        self.rec_k = np.zeros(cap)
        self.nxt = np.zeros(cap, dtype=np.int64)

    def _ensure_capacity(self, extra):
        if not self.record:
            return
        need = self._rec_n + extra
        if need <= self.rec_pair.size:
            return
        cap = max(need, 2 * self.rec_pair.size, 1024)
        old = (self.rec_pair, self.rec_target, self.rec_birth, self.rec_death, self.rec_k, self.nxt)
        self._alloc(cap)
        n = self._rec_n
        for new, prev in zip((self.rec_pair, self.rec_target, self.rec_birth, self.rec_death, self.rec_k, self.nxt), old):
            new[:n] = prev[:n]

    @property
    def living(self) -> int:
        return int(self.count.sum())

    def set_tables(self, tables: pol.PhantomTables):
        """Swap spawn tables (policy changed); living phantoms are untouched."""
        if tables.n_components != self.tables.n_components:
            raise ValueError("component layout changed")
        self.tables = tables

    def process(self, states, actions, F, phantom_u, spawn=True, cum=None):
        """Run the phantom kernel over one segment.

        Returns ``(est, vdeath, cum)``: per objective/component sums of
        ``K * (birth difference + continuation)``, per component sums of
        ``K * lifetime`` over phantoms dying in the segment, and the running
        objective sums (continued from ``cum`` if given).
        """
        n_obj = F.shape[0]
        tb = self.tables
        est = np.zeros((n_obj, tb.n_components))
        vdeath = np.zeros(tb.n_components)
        cum = np.zeros(n_obj) if cum is None else cum
        if len(states) == 0:
            return est, vdeath, cum
        if spawn:
            self._ensure_capacity(len(states))
        rec_len_marker = self.rec_target if self.record else np.zeros(0, dtype=np.int64)
        self._rec_n = int(self.kernels.wd_process(
            states, actions, F, self.model.offsets, tb.comp_offsets, tb.comp_of_pair, tb.k_of_pair,
            tb.phantom_cdf, self.model.action_counts, phantom_u, bool(spawn), int(self.time),
            self.ksum, self.kksum, self.count, self.max_count, est, vdeath, cum,
            self.rec_pair, rec_len_marker, self.rec_birth, self.rec_death, self.rec_k,
            self.head, self.nxt, self._rec_n))
        self.time += len(states)
        return est, vdeath, cum

    def living_weights(self) -> np.ndarray:
        """Per-component sum of ``K`` over living phantoms."""
        w = np.zeros(self.tables.n_components)
        np.add.at(w, self._flush_comp, self.ksum[self._flush_pairs, self._flush_local])
        return w

    def records(self):
        """Recorded phantoms as a list of :class:`PhantomRecord`."""
        n = self._rec_n
        comp = self.tables.comp_of_pair
        return [PhantomRecord(int(self.rec_birth[k]), int(comp[self.rec_pair[k]]), int(self.rec_pair[k]),
                              int(self.rec_target[k]), float(self.rec_k[k]), int(self.rec_death[k]))
                for k in range(n)]

    def record_arrays(self):
        n = self._rec_n
        return dict(pair=self.rec_pair[:n].copy(), target=self.rec_target[:n].copy(),
                    birth=self.rec_birth[:n].copy(), death=self.rec_death[:n].copy(),
                    k=self.rec_k[:n].copy(), component=self.tables.comp_of_pair[self.rec_pair[:n]])


def _gamma(mode: str, F, states_pairs, exact_values):
    if mode == "sample":
        return F[:, states_pairs].mean(axis=1)
    if mode == "exact":
        return exact_values
    raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")


def _exact_objective_means(model: MdpModel, theta):
    an = analyze(model, theta)
    return model.objectives() @ an.pi


def wd_infinite_horizon(model: MdpModel, policy, N: int, seed=None, gamma_mode: str = "sample",
                        coords: str = "alpha", x0=None, step_cap: int = DEFAULT_STEP_CAP,
                        record: bool = False, backend=None, return_ledger: bool = False):
    """Consistent phantom estimator over ``N`` spawning steps.

    The trajectory is extended past ``N`` (without new phantoms) until every
    phantom has died.  ``coords="psi"`` estimates the softmax-coordinate
    gradient instead of the angle gradient.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    tables = _tables_for(model, policy, coords)
    theta = _theta_for(model, policy, coords)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sim = Simulator(model, theta, rng, x0, backend=backend)
    F = np.ascontiguousarray(model.objectives())
    ledger = PhantomLedger(model, tables, record=record, record_capacity=N, backend=backend)
    states, actions, pu = sim.run(N)
    est, vdeath, cum = ledger.process(states, actions, F, pu, spawn=True)
    pairs = model.offsets[states] + actions
    exact_vals = _exact_objective_means(model, theta) if gamma_mode == "exact" else None
    gamma = _gamma(gamma_mode, F, pairs, exact_vals)
    chunk = max(4 * N, 1024)
    extra = 0
    while ledger.living > 0:
        if extra >= step_cap:
            raise ExtinctionTimeout(f"{ledger.living} phantoms still alive after {step_cap} extra steps")
        n = min(chunk, step_cap - extra)
        s2, a2, pu2 = sim.run(n)
        e2, v2, cum = ledger.process(s2, a2, F, pu2, spawn=False, cum=cum)
        est += e2
        vdeath += v2
        extra += n
    values = (tables.scale_num / N) * (est - np.outer(gamma, vdeath))
    out = GradientEstimate(values, batch=0, samples=N, coords=coords, gamma_hat=gamma)
    if return_ledger:
        return out, ledger
    return out


class FastWdEstimator:
    """Sequential fast-phantom estimator over consecutive batches of one trajectory.

    Phantoms living at the end of a batch carry over: they contribute the
    batch's costs to the batch they cross, and their ``-nu * Gamma`` term is
    charged to the batch in which they die.
    """

    def __init__(self, model: MdpModel, policy, N: int, seed=None, gamma_mode: str = "sample",
                 coords: str = "alpha", x0=None, record: bool = False, backend=None):
        if N < 1:
            raise ValueError("N must be >= 1")
        if gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
        self.model = model
        self.N = int(N)
        self.coords = coords
        self.gamma_mode = gamma_mode
        theta = _theta_for(model, policy, coords)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.sim = Simulator(model, theta, rng, x0, backend=backend)
        self.ledger = PhantomLedger(model, _tables_for(model, policy, coords), record=record, backend=backend)
        self.F = np.ascontiguousarray(model.objectives())
        self.batch = 0
        self._exact = _exact_objective_means(model, theta) if gamma_mode == "exact" else None

    def set_policy(self, policy):
        theta = _theta_for(self.model, policy, self.coords)
        self.sim.set_theta(theta)
        self.ledger.set_tables(_tables_for(self.model, policy, self.coords))
        if self.gamma_mode == "exact":
            self._exact = _exact_objective_means(self.model, theta)

    def set_model(self, model: MdpModel):
        self.sim.set_model(model)
        self.model = model
        self.ledger.model = model
        self.F = np.ascontiguousarray(model.objectives())
        if self.gamma_mode == "exact":
            self._exact = _exact_objective_means(model, self.sim.theta)

    def step(self, spawn: bool = True):
        """Simulate one batch; returns ``(estimate, batch_pairs)``."""
        states, actions, pu = self.sim.run(self.N)
        est = fast_wd_batch(self.ledger, self.model, states, actions, pu, self.gamma_mode,
                            exact_values=self._exact, spawn=spawn, F=self.F)
        est.batch = self.batch
        self.batch += 1
        return est, self.model.offsets[states] + actions


def fast_wd_batch(ledger: PhantomLedger, model: MdpModel, states, actions, phantom_u,
                  gamma_mode: str = "sample", exact_values=None, spawn: bool = True, F=None):
    """One batch of the fast phantom estimator on a given trajectory segment.

    ``exact_values`` supplies ``pi . F`` for ``gamma_mode="exact"``.
    """
    F = np.ascontiguousarray(model.objectives()) if F is None else F
    N = len(states)
    est, vdeath, cum = ledger.process(states, actions, F, phantom_u, spawn=spawn)
    est += np.outer(cum, ledger.living_weights())
    if gamma_mode == "exact":
        if exact_values is None:
            raise ValueError("exact gamma mode needs exact objective values")
        gamma = np.asarray(exact_values, dtype=float)
    else:
        gamma = cum / N
    values = (ledger.tables.scale_num / N) * (est - np.outer(gamma, vdeath))
    return GradientEstimate(values, samples=N, coords="alpha" if ledger.tables.scale_num == 2.0 else "psi",
                            gamma_hat=gamma, batch_mean=cum / N, death_weight=vdeath)


def score_function_gradient(model: MdpModel, policy, N: int, seed=None, n_batches: int = 1,
                            x0=None, backend=None, return_batches: bool = False):
    """Score-function (likelihood ratio) estimate of the softmax-coordinate gradient.

    Forgetting factor 1: within a batch the eligibility trace is the running
    sum of ``e_{(i,a)} - theta_i`` over visited pairs, and the estimate is
    ``(1/N) sum_t F(Z_t) z_t``.  The chain runs on across batches; the trace
    restarts at every batch.
    """
    theta = _theta_for(model, policy, "psi")
    if np.any(theta <= 0):
        raise pol.BoundaryError("score function is unbounded when an action probability is 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sim = Simulator(model, theta, rng, x0, backend=backend)
    F = model.objectives()
    offs = model.offsets
    ps = model.pair_state
    n_pairs = model.num_pairs
    out = np.empty((n_batches, F.shape[0], n_pairs))
    eye_rows = np.eye(n_pairs)
    base = eye_rows - theta[None, :] * (ps[None, :] == ps[:, None])  # score row per observed pair
    for b in range(n_batches):
        states, actions, _ = sim.run(N)
        z = offs[states] + actions
        trace = np.cumsum(base[z], axis=0)
        out[b] = (F[:, z] @ trace) / N
    if return_batches:
        return out
    mean = out.mean(axis=0)
    var = out.var(axis=0, ddof=1) if n_batches > 1 else None
    return GradientEstimate(mean, samples=N * n_batches, coords="psi", variance=var)


def wd_canonical_gradient(model: MdpModel, theta, N: int, seed=None, gamma_mode: str = "sample",
                          x0=None, step_cap: int = DEFAULT_STEP_CAP, backend=None) -> GradientEstimate:
    """Phantom estimator of the softmax-coordinate gradient at ``theta``."""
    return wd_infinite_horizon(model, theta, N, seed, gamma_mode, coords="psi", x0=x0,
                               step_cap=step_cap, backend=backend)


def spawn_streams(seed, n: int):
    """Independent generators for ``n`` replications (``SeedSequence.spawn``)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def replicate(fn, n: int, seed=None, **kwargs):
    """Run ``fn(seed=rng_k, **kwargs)`` for ``n`` independent streams; stack the values."""
    vals = [fn(seed=rng, **kwargs).values for rng in spawn_streams(seed, n)]
    return np.array(vals)


def summarize(samples, level: float = 0.05):
    """Mean, unbiased variance and normal-approximation CI half-width along axis 0."""
    from scipy.stats import norm

    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1) if n > 1 else np.full_like(mean, np.nan)
    half = norm.ppf(1 - level / 2) * np.sqrt(var / n)
    return mean, var, half


@dataclass
class BiasReport:
    """Per batch size: bias of each Gamma mode and the covariance term."""

    batch_sizes: np.ndarray
    exact_mean: np.ndarray        # (len(N), n_obj, n_comp) mean error of exact-Gamma mode
    exact_se: np.ndarray
    sample_bias: np.ndarray       # (len(N), n_obj, n_comp) mean (sample - exact) difference
    sample_se: np.ndarray
    covariance: np.ndarray        # (len(N), n_obj, n_comp) Cov(K*nu in batch, Gamma_hat)
    slope: float
    replications: int
    elapsed: float = 0.0
    per_component_slopes: np.ndarray = field(default_factory=lambda: np.zeros(0))


def measure_bias_and_kappa(model: MdpModel, policy, batch_sizes=(5, 10, 50, 100), replications: int = 1000,
                           seed=None, burn_in_batches: int = 20, steps_per_replication=None,
                           backend=None) -> BiasReport:
    """Empirical bias of the fast estimator under both ``Gamma`` modes.

    For each ``N``: ``replications`` independent trajectories, each started
    from a stationary draw and warmed up for ``burn_in_batches`` batches.
    Per batch the exact-mode error ``estimate - exact gradient`` is recorded,
    together with the paired sample-minus-exact difference, which equals
    ``(2/N) (C - Gamma_hat_n) * sum_{deaths in batch} K nu``.  The number of
    measured batches per replication grows with ``N`` (``steps_per_replication``
    defaults to ``max(2000, 4 N^2)`` steps) so the ``1/N`` trend stays resolvable.
    """
    if replications < 100:
        warnings.warn(f"only {replications} replications; bias tests have little power", StatisticalPowerWarning)
    from .mdp import exact_gradient

    t0 = time.perf_counter()
    alpha = policy.alpha if hasattr(policy, "alpha") else np.asarray(policy, dtype=float)
    theta = pol.theta_from_alpha(alpha, model.action_counts)
    F = model.objectives()
    exact_vals = F @ analyze(model, theta).pi
    g_exact = exact_gradient(model, alpha)
    n_obj, n_comp = g_exact.shape
    Ns = np.asarray(batch_sizes, dtype=int)
    shape = (Ns.size, n_obj, n_comp)
    ex_mean, ex_se, sb, sb_se, cov = (np.zeros(shape) for _ in range(5))
    master = np.random.SeedSequence(seed)
    children = master.spawn(Ns.size)
    for ni, N in enumerate(Ns):
        steps = steps_per_replication(N) if callable(steps_per_replication) else (
            steps_per_replication or max(2000, 4 * int(N) ** 2))
        n_b = max(int(steps) // int(N), 2)
        errs = np.zeros((replications, n_obj, n_comp))
        diffs = np.zeros_like(errs)
        covs = np.zeros_like(errs)
        for r, rng in enumerate(spawn_streams(children[ni], replications)):
            fe = FastWdEstimator(model, alpha, N, rng, "exact", backend=backend)
            for _ in range(burn_in_batches):
                fe.step()
            e_sum = np.zeros((n_obj, n_comp))
            gam = np.zeros((n_b, n_obj))
            v = np.zeros((n_b, n_comp))
            for b in range(n_b):
                est, _ = fe.step()
                e_sum += est.values
                gam[b] = est.batch_mean
                v[b] = est.death_weight
            errs[r] = e_sum / n_b - g_exact
            d = (2.0 / N) * (exact_vals[None, :, None] - gam[:, :, None]) * v[:, None, :]
            diffs[r] = d.mean(axis=0)
            gc = gam - gam.mean(axis=0)
            vc = v - v.mean(axis=0)
            covs[r] = (gc[:, :, None] * vc[:, None, :]).mean(axis=0)
        ex_mean[ni] = errs.mean(axis=0)
        ex_se[ni] = errs.std(axis=0, ddof=1) / np.sqrt(replications)
        sb[ni] = diffs.mean(axis=0)
        sb_se[ni] = diffs.std(axis=0, ddof=1) / np.sqrt(replications)
        cov[ni] = covs.mean(axis=0)
    mag = np.linalg.norm(sb[:, 0, :], axis=1)
    slope = float(np.polyfit(np.log(Ns), np.log(mag), 1)[0]) if Ns.size > 1 else float("nan")
    comp_slopes = (np.array([np.polyfit(np.log(Ns), np.log(np.abs(sb[:, 0, k]) + 1e-300), 1)[0]
                             for k in range(n_comp)]) if Ns.size > 1 else np.zeros(0))
    return BiasReport(Ns, ex_mean, ex_se, sb, sb_se, cov, slope, replications,
                      time.perf_counter() - t0, comp_slopes)


@dataclass
class PhantomStats:
    """Summary of a recorded phantom history."""

    max_list_size: np.ndarray          # per target pair
    max_gap: np.ndarray                # per target pair: longest stretch without a visit
    lifetime_quantiles: dict
    mean_lifetime: float
    bound_violations: int
    lifetimes: np.ndarray
    by_birth_target: dict


def phantom_statistics(records, pairs, n_pairs: int, t0: int = 0) -> PhantomStats:
    """Audit a recorded run: list sizes vs inter-visit gaps, lifetimes.

    ``records`` is the dict from :meth:`PhantomLedger.record_arrays`;
    ``pairs`` is the observed pair sequence starting at time ``t0``.
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    T = pairs.size
    end = t0 + T
    birth, death, target = records["birth"], records["death"], records["target"]
    max_size = np.zeros(n_pairs, dtype=np.int64)
    max_gap = np.zeros(n_pairs, dtype=np.int64)
    violations = 0
    times = np.arange(t0, end)
    for z in range(n_pairs):
        visits = times[pairs == z]
        bounds = np.concatenate(([t0 - 1], visits, [end]))
        gaps = np.diff(bounds)
        max_gap[z] = gaps.max() if gaps.size else T
        sel = target == z
        if not np.any(sel):
            continue
        # group by death time (all die together); alive ones grouped at `end`
        d = np.where(death[sel] >= 0, death[sel], end)
        uniq, cnt = np.unique(d, return_counts=True)
        max_size[z] = cnt.max()
        # list size at its death time must not exceed time since previous visit
        idx = np.searchsorted(bounds, uniq) - 1
        prev = bounds[np.clip(idx, 0, None)]
        violations += int(np.sum(cnt > uniq - prev))
    died = death >= 0
    life = (death - birth)[died]
    q = {k: float(np.quantile(life, k)) for k in (0.5, 0.9, 0.99)} if life.size else {}
    groups = {}
    if life.size:
        keys = records["pair"][died] * n_pairs + target[died]
        for key in np.unique(keys):
            m = keys == key
            groups[(int(key // n_pairs), int(key % n_pairs))] = (float(life[m].mean()),
                                                                 float(life[m].std(ddof=1) / np.sqrt(m.sum())) if m.sum() > 1 else np.nan,
                                                                 int(m.sum()))
    return PhantomStats(max_size, max_gap, q, float(life.mean()) if life.size else float("nan"),
                        violations, life, groups)


def expected_lifetimes(model: MdpModel, theta) -> np.ndarray:
    """Exact mean hitting times ``h[z, t]`` (steps from pair z to pair t)."""
    an = analyze(model, theta)
    P = an.kernel.matrix
    return np.column_stack([hitting_times(P, t) for t in range(P.shape[0])])
