"""Constant-step constrained optimizers over the spherical angle box.

Update rules (all act on the flat angle vector ``alpha`` and the multiplier
vector ``lam``; ``B`` denotes constraint values ``pi . beta_l - gamma_l``):

* ``primal-dual``: one projected gradient step on the augmented Lagrangian
  plus one multiplier step.  ``lambda_form="max"`` uses the max-forms
  ``max[0, lam + rho B]`` (primal weight) and ``max[(1 - eps/rho) lam,
  lam + eps B]`` (multiplier); ``lambda_form="plain"`` uses ``lam + rho B``
  and ``lam + eps B``.
* ``multiplier``: ``J`` primal steps with ``lam`` frozen, then
  ``lam <- max[0, lam + rho B]``.
* ``fixed-multiplier``: primal steps only.
* ``slow-lambda``: primal steps; ``lam`` moves by the window average of
  ``B`` once every ``floor(1/eps)`` steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import policy as pol
from .estimators import FastWdEstimator
from .mdp import MdpModel, analyze, exact_gradient

log = logging.getLogger(__name__)

RULES = ("primal-dual", "multiplier", "fixed-multiplier", "slow-lambda")


class OptimizerInputError(ValueError):
    """Non-finite gradients or constraint estimates were supplied."""


@dataclass(frozen=True)
class Hyper:
    eps: float = 2e-7
    rho: float = 100.0
    delta: float = 1.0
    mu: float = 1e-6
    N: int = 10
    J: int = 1
    lambda_form: str = "max"

    def __post_init__(self):
        if self.eps <= 0 or self.rho <= 0:
            raise ValueError("eps and rho must be positive")
        if not (0 < self.delta <= 1):
            raise ValueError("delta must lie in (0, 1]")
        if self.N < 1 or self.J < 1:
            raise ValueError("N and J must be >= 1")
        if self.lambda_form not in ("max", "plain"):
            raise ValueError("lambda_form must be 'max' or 'plain'")
        if not (0 <= self.mu < np.pi / 4):
            raise ValueError("mu must lie in [0, pi/4)")

    @property
    def period(self) -> int:
        """Multiplier period ``floor(1/eps)`` of the slow-lambda rule."""
        return max(int(np.floor(1.0 / self.eps)), 1)


@dataclass(frozen=True)
class OptimizerState:
    alpha: np.ndarray
    lam: np.ndarray
    smoothed_B: np.ndarray
    n: int = 0
    hyper: Hyper = field(default_factory=Hyper)
    window_sum: np.ndarray | None = None
    window_count: int = 0

    @classmethod
    def start(cls, alpha, n_constraints: int, hyper: Hyper | None = None, lam=None):
        hyper = hyper or Hyper()
        L = int(n_constraints)
        lam = np.zeros(L) if lam is None else np.asarray(lam, dtype=float)
        return cls(project_to_Amu(alpha, hyper.mu), lam, np.zeros(L), 0, hyper, np.zeros(L), 0)


@dataclass(frozen=True)
class KtResidual:
    stationarity: float
    slackness: float
    feasibility: float
    dual_sign: float

    @property
    def total(self) -> float:
        return max(self.stationarity, self.slackness, self.feasibility, self.dual_sign)


def project_to_Amu(alpha, mu: float) -> np.ndarray:
    """Reflect into ``[0, pi/2]`` (theta is invariant), then clamp to ``[mu, pi/2 - mu]``."""
    x = np.mod(np.abs(np.asarray(alpha, dtype=float)), np.pi)
    x = np.where(x > 0.5 * np.pi, np.pi - x, x)
    return np.clip(x, mu, 0.5 * np.pi - mu)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=float))):
            raise OptimizerInputError("non-finite gradient or constraint estimate")


def _primal(state: OptimizerState, gradC, gradB, Bhat, form: str):
    h = state.hyper
    gradB = np.asarray(gradB, dtype=float).reshape(-1, np.size(gradC))
    Bhat = np.asarray(Bhat, dtype=float)
    w = state.lam + h.rho * Bhat
    if form == "max":
        w = np.maximum(0.0, w)
    direction = np.asarray(gradC, dtype=float) + w @ gradB
    return project_to_Amu(state.alpha - h.eps * direction, h.mu)


def primal_dual_step(state: OptimizerState, gradC, gradB, Bhat) -> OptimizerState:
    """One primal-dual update; the multiplier form follows ``hyper.lambda_form``."""
    _check_finite(gradC, gradB, Bhat)
    h = state.hyper
    alpha = _primal(state, gradC, gradB, Bhat, h.lambda_form)
    Bhat = np.asarray(Bhat, dtype=float)
    if h.lambda_form == "max":
        lam = np.maximum((1.0 - h.eps / h.rho) * state.lam, state.lam + h.eps * Bhat)
    else:
        lam = state.lam + h.eps * Bhat
    return replace(state, alpha=alpha, lam=lam, n=state.n + 1)


def primal_step(state: OptimizerState, gradC, gradB, Bhat) -> OptimizerState:
    """Primal step on the augmented Lagrangian with ``lam`` frozen (max-form weight)."""
    _check_finite(gradC, gradB, Bhat)
    return replace(state, alpha=_primal(state, gradC, gradB, Bhat, "max"), n=state.n + 1)


def multiplier_update(state: OptimizerState, B) -> OptimizerState:
    _check_finite(B)
    return replace(state, lam=np.maximum(0.0, state.lam + state.hyper.rho * np.asarray(B, dtype=float)))


def multiplier_inexact(state: OptimizerState, J: int, oracle) -> OptimizerState:
    """``J`` primal steps with frozen ``lam``, then the multiplier step.

    ``oracle(alpha)`` returns ``(gradC, gradB, B)`` (exact or estimated).
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    for _ in range(J):
        gC, gB, B = oracle(state.alpha)
        state = primal_step(state, gC, gB, B)
    _, _, B = oracle(state.alpha)
    return multiplier_update(state, B)


def slow_lambda_update(state: OptimizerState, Bhat) -> OptimizerState:
    """Accumulate ``Bhat``; every ``floor(1/eps)`` calls add the window average to ``lam``."""
    _check_finite(Bhat)
    period = state.hyper.period
    ws = (state.window_sum if state.window_sum is not None else np.zeros_like(state.lam)) + np.asarray(Bhat, dtype=float)
    cnt = state.window_count + 1
    lam = state.lam
    if cnt >= period:
        lam = lam + ws / period
        ws = np.zeros_like(ws)
        cnt = 0
    return replace(state, lam=lam, window_sum=ws, window_count=cnt)


def smoothed_constraint_update(state: OptimizerState, batch_average) -> OptimizerState:
    """Exponential smoothing ``B <- B + delta (batch_average - B)``."""
    _check_finite(batch_average)
    d = state.hyper.delta
    sb = state.smoothed_B + d * (np.asarray(batch_average, dtype=float) - state.smoothed_B)
    return replace(state, smoothed_B=sb)


def exact_oracle(model: MdpModel):
    """``alpha -> (gradC, gradB, B)`` from the analytic oracles."""
    def oracle(alpha):
        g = exact_gradient(model, alpha)
        an = analyze(model, pol.theta_from_alpha(alpha, model.action_counts))
        return g[0], g[1:], an.values[1:]
    return oracle


def kt_residual(model: MdpModel, alpha, lam, projected: bool = False, mu: float = 0.0) -> KtResidual:
    """Kuhn-Tucker residual at ``(alpha, lam)`` from exact gradients.

    ``projected=True`` zeroes stationarity components that push against an
    active box bound ``[mu, pi/2 - mu]``.
    """
    lam = np.asarray(lam, dtype=float)
    g = exact_gradient(model, alpha)
    an = analyze(model, pol.theta_from_alpha(alpha, model.action_counts))
    B = an.values[1:]
    st = g[0] + lam @ g[1:] if lam.size else g[0].copy()
    if projected:
        a = np.asarray(alpha, dtype=float)
        st = np.where((a <= mu + 1e-12) & (st > 0), 0.0, st)
        st = np.where((a >= 0.5 * np.pi - mu - 1e-12) & (st < 0), 0.0, st)
    return KtResidual(
        stationarity=float(np.linalg.norm(st)),
        slackness=float(abs(B @ lam)) if lam.size else 0.0,
        feasibility=float(np.max(np.maximum(B, 0.0))) if B.size else 0.0,
        dual_sign=float(np.max(np.maximum(-lam, 0.0))) if lam.size else 0.0,
    )


@dataclass
class ModelSchedule:
    """Piecewise-constant model sequence: ``models[k]`` applies from ``times[k]`` on."""

    times: list
    models: list

    def __post_init__(self):
        if not self.models or len(self.times) != len(self.models):
            raise ValueError("schedule needs matching times and models")
        if self.times[0] != 0 or any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("schedule times must start at 0 and increase")

    def at(self, t: int) -> MdpModel:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.models[k]

    def regime(self, t: int) -> int:
        return int(np.searchsorted(self.times, t, side="right")) - 1


@dataclass
class AdaptiveTrace:
    batch: np.ndarray
    time: np.ndarray
    regime: np.ndarray
    cost_estimate: np.ndarray      # batch sample average of the cost
    exact_cost: np.ndarray         # C(alpha(n)) under the regime's model
    B_estimate: np.ndarray         # (n, L) smoothed constraint estimate used by the update
    exact_B: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    error: str | None = None

    def final_window(self, regime: int, width: int = 100, exact: bool = True) -> float:
        idx = np.nonzero(self.regime == regime)[0][-width:]
        src = self.exact_cost if exact else self.cost_estimate
        return float(src[idx].mean())

    def rows(self):
        for k in range(self.batch.size):
            yield (int(self.batch[k]), int(self.time[k]), float(self.cost_estimate[k]),
                   *self.B_estimate[k].tolist(), *self.lam[k].tolist(),
                   *self.alpha[k].tolist(), *self.theta[k].tolist())


def run_adaptive(schedule, hyper: Hyper, n_batches: int, alpha0, seed=None, rule: str = "primal-dual",
                 gradients: str = "wd", gamma_mode: str = "sample", lam0=None,
                 smoothing_init: str = "first", smoothing_order: str = "lagged",
                 backend=None) -> AdaptiveTrace:
    """Adaptive control loop over a model schedule.

    Per batch: simulate ``N`` steps under the current policy, form the batch
    constraint average (optionally exponentially smoothed), estimate gradients
    with fast phantoms (``gradients="wd"``) or take exact ones
    (``gradients="exact"``), then apply ``rule``.  Any error stops the run
    and the partial trace is returned with ``error`` set.
    """
    if isinstance(schedule, MdpModel):
        schedule = ModelSchedule([0], [schedule])
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    model = schedule.at(0)
    L = model.num_constraints
    state = OptimizerState.start(alpha0, L, hyper, lam0)
    N = hyper.N
    est = FastWdEstimator(model, state.alpha, N, seed, gamma_mode, backend=backend) if gradients == "wd" else None
    rec = {k: [] for k in ("batch", "time", "regime", "cost", "xcost", "B", "xB", "lam", "alpha", "theta")}
    error = None
    counts = model.action_counts
    for n in range(n_batches):
        t = n * N
        m_now = schedule.at(t)
        if m_now is not model:
            model = m_now
            if est is not None:
                est.set_model(model)
        theta = pol.theta_from_alpha(state.alpha, counts)
        try:
            an = analyze(model, theta)
            if est is not None:
                g, pairs = est.step()
                gC, gB = g.values[0], g.values[1:]
                batch_B = g.batch_mean[1:] - model.bounds
                batch_cost = float(g.batch_mean[0])
            else:
                gx = exact_gradient(model, state.alpha)
                gC, gB = gx[0], gx[1:]
                batch_B = an.values[1:]
                batch_cost = float(an.values[0])
            if n == 0 and smoothing_init == "first":
                state = replace(state, smoothed_B=np.asarray(batch_B, dtype=float).copy())
                Bhat = state.smoothed_B
            elif smoothing_order == "lagged":
                Bhat = state.smoothed_B
                state = smoothed_constraint_update(state, batch_B)
            else:
                state = smoothed_constraint_update(state, batch_B)
                Bhat = state.smoothed_B
            rec["batch"].append(n)
            rec["time"].append(t)
            rec["regime"].append(schedule.regime(t))
            rec["cost"].append(batch_cost)
            rec["xcost"].append(float(an.values[0]))
            rec["B"].append(Bhat.copy())
            rec["xB"].append(an.values[1:].copy())
            rec["lam"].append(state.lam.copy())
            rec["alpha"].append(state.alpha.copy())
            rec["theta"].append(theta)
            if rule == "primal-dual":
                state = primal_dual_step(state, gC, gB, Bhat)
            elif rule == "fixed-multiplier":
                state = primal_step(state, gC, gB, Bhat)
            elif rule == "multiplier":
                state = primal_step(state, gC, gB, Bhat)
                if state.n % hyper.J == 0:
                    state = multiplier_update(state, Bhat)
            else:
                state = slow_lambda_update(primal_step(state, gC, gB, Bhat), Bhat)
            if est is not None:
                est.set_policy(state.alpha)
        except Exception as exc:  # keep the partial trace
            error = f"{type(exc).__name__}: {exc}"
            log.warning("adaptive run stopped at batch %d: %s", n, error)
            break
    L_ = max(L, 0)
    def arr(key, width):
        return np.array(rec[key]) if rec[key] else np.zeros((0, width))
    return AdaptiveTrace(
        batch=np.array(rec["batch"], dtype=int), time=np.array(rec["time"], dtype=int),
        regime=np.array(rec["regime"], dtype=int), cost_estimate=np.array(rec["cost"]),
        exact_cost=np.array(rec["xcost"]), B_estimate=arr("B", L_), exact_B=arr("xB", L_),
        lam=arr("lam", L_), alpha=arr("alpha", model.num_components), theta=arr("theta", model.num_pairs),
        error=error)
