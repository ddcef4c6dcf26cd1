"""Transmission scheduling over a finite-state Markov channel.

State is ``(b, c, y)``: buffer occupancy, channel index and the arrival flag of
the current slot.  Action 1 transmits the head-of-line packet (succeeds with
probability ``f[c]``); action 0 waits.  Only action 0 is available when the
buffer is empty.  The buffer is truncated at ``capacity`` and arrivals into a
full buffer are dropped before service.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .mdp import MdpModel, ModelError, NumericalError, analyze


class ConvergenceError(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass


@dataclass(frozen=True)
class TxModel:
    channel: np.ndarray         # K x K, row-stochastic
    success: np.ndarray         # f(c), increasing
    tx_cost: np.ndarray         # c(c, 1), decreasing; c(c, 0) = 0
    delay_cost: np.ndarray      # beta(c, 0), increasing; beta(c, 1) = 0
    arrival: float              # delta
    bound: float                # gamma
    capacity: int = 20

    def __post_init__(self):
        for name in ("channel", "success", "tx_cost", "delay_cost"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        K = self.success.size
        if self.channel.shape != (K, K):
            raise ModelError(f"channel matrix must be {K}x{K}")
        if np.any(self.channel < 0) or not np.allclose(self.channel.sum(axis=1), 1.0, atol=1e-12):
            raise ModelError("channel matrix must be row-stochastic")
        if self.tx_cost.size != K or self.delay_cost.size != K:
            raise ModelError("per-channel arrays must have the same length")
        if np.any((self.success < 0) | (self.success > 1)):
            raise ModelError("success probabilities must lie in [0, 1]")
        if not 0.0 <= self.arrival <= 1.0:
            raise ModelError("arrival probability must lie in [0, 1]")
        if np.any(np.diff(self.success) < 0):
            raise ModelError("success probability must be nondecreasing in the channel index")
        if np.any(np.diff(self.tx_cost) > 0):
            raise ModelError("transmission cost must be nonincreasing in the channel index")
        if np.any(np.diff(self.delay_cost) < 0):
            raise ModelError("delay cost must be nondecreasing in the channel index")
        if np.any(self.tx_cost < 0) or np.any(self.delay_cost < 0):
            raise ModelError("costs must be nonnegative")
        if int(self.capacity) < 1:
            raise ModelError("capacity must be at least 1")
        object.__setattr__(self, "capacity", int(self.capacity))

    @property
    def num_channels(self) -> int:
        return int(self.success.size)

    @property
    def shape(self):
        return (self.capacity + 1, self.num_channels, 2)

    def state_index(self, b, c, y):
        return (b * self.num_channels + c) * 2 + y

    def with_bound(self, bound) -> "TxModel":
        return TxModel(self.channel, self.success, self.tx_cost, self.delay_cost,
                       self.arrival, bound, self.capacity)

    def to_dict(self) -> dict:
        return {"channel": self.channel.tolist(), "success": self.success.tolist(),
                "tx_cost": self.tx_cost.tolist(), "delay_cost": self.delay_cost.tolist(),
                "arrival": self.arrival, "bound": self.bound, "capacity": self.capacity}


def birth_death_channel(K: int, stay: float = 0.6) -> np.ndarray:
    P = np.zeros((K, K))
    for i in range(K):
        nb = [j for j in (i - 1, i + 1) if 0 <= j < K]
        P[i, i] = stay if nb else 1.0
        for j in nb:
            P[i, j] = (1.0 - stay) / len(nb)
    return P


def default_model(capacity: int = 20) -> TxModel:
    """Suite default; satisfies the stability condition with margin >= 0.1."""
    return TxModel(birth_death_channel(3), [0.3, 0.5, 0.9], [1.5, 0.8, 0.2],
                   [0.6, 0.6, 0.6], arrival=0.1, bound=0.3, capacity=capacity)


@dataclass(frozen=True)
class Stability:
    stable: bool
    lhs: float
    rhs: float
    message: str = ""

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


def stability_check(model: TxModel) -> Stability:
    """``delta / min f < 1 - gamma / min beta``."""
    f_min = float(model.success.min())
    b_min = float(model.delay_cost.min())
    if b_min <= 0:
        return Stability(False, math.nan, math.nan, "minimum delay cost is zero; condition undefined")
    rhs = 1.0 - model.bound / b_min
    if f_min <= 0:
        lhs = 0.0 if model.arrival == 0 else math.inf
    else:
        lhs = model.arrival / f_min
    ok = lhs < rhs
    return Stability(ok, lhs, rhs, "" if ok else "stability condition violated")


def _successors(model: TxModel, b, c, y, u):
    """List of ``(next_state, prob)`` under action ``u``."""
    K, cap = model.num_channels, model.capacity
    served = model.success[c] if (u == 1 and b > 0) else 0.0
    out = []
    # admission happens before service, so a full buffer drops the arrival
    # but a successful transmission still frees a slot
    admitted = min(b + y, cap)
    for nb, pb in ((admitted - 1, served), (admitted, 1.0 - served)):
        if pb == 0.0:
            continue
        for nc in range(K):
            pc = model.channel[c, nc]
            if pc == 0.0:
                continue
            for ny, py in ((0, 1.0 - model.arrival), (1, model.arrival)):
                if py > 0.0:
                    out.append((model.state_index(nb, nc, ny), pb * pc * py))
    return out


def transition_tensor(model: TxModel) -> np.ndarray:
    """``P[u, s, s']`` over all states; action 1 at ``b = 0`` behaves like action 0."""
    S = int(np.prod(model.shape))
    P = np.zeros((2, S, S))
    for b, c, y in np.ndindex(*model.shape):
        s = model.state_index(b, c, y)
        for u in (0, 1):
            for t, p in _successors(model, b, c, y, u):
                P[u, s, t] += p
    return P


def stage_costs(model: TxModel):
    """``(cost[u, s], delay[u, s])`` with the delay penalty charged only when ``b > 0``."""
    b, c, _ = np.indices(model.shape).reshape(3, -1)
    cost = np.stack([np.zeros(b.size), np.where(b > 0, model.tx_cost[c], 0.0)])
    delay = np.stack([np.where(b > 0, model.delay_cost[c], 0.0), np.zeros(b.size)])
    return cost, delay


def flatten_to_mdp(model: TxModel) -> MdpModel:
    P = transition_tensor(model)
    cost, delay = stage_costs(model)
    b = np.indices(model.shape).reshape(3, -1)[0]
    counts = np.where(b > 0, 2, 1)
    rows, cvals, dvals = [], [], []
    for s in range(b.size):
        for u in range(counts[s]):
            rows.append(P[u, s])
            cvals.append(cost[u, s])
            dvals.append(delay[u, s])
    return MdpModel(counts, np.array(rows), np.array(cvals), np.array([dvals]), np.array([model.bound]))


@dataclass(frozen=True)
class ValueFunction:
    values: np.ndarray          # over flat states
    policy: np.ndarray          # greedy action per state
    q_values: np.ndarray        # (2, S); action 1 is +inf at b = 0
    discount: float
    multiplier: float
    sweeps: int
    shape: tuple = field(default=())

    def table(self, arr=None):
        return np.asarray(self.values if arr is None else arr).reshape(self.shape)

    def monotone_in_buffer(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.diff(self.table(), axis=0) >= -tol))


def value_iteration(model: TxModel, multiplier: float, discount: float = 0.99,
                    tol: float = 1e-8, max_sweeps: int = 100_000, tie_tol: float = 1e-12) -> ValueFunction:
    """Lagrangian discounted value iteration; ties are broken towards not transmitting."""
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    if multiplier < 0:
        raise ValueError("multiplier must be nonnegative")
    P = transition_tensor(model)
    cost, delay = stage_costs(model)
    g = cost + multiplier * delay
    empty = np.indices(model.shape).reshape(3, -1)[0] == 0
    V = np.zeros(P.shape[1])
    for sweep in range(1, max_sweeps + 1):
        Q = g + discount * (P @ V)
        Q[1, empty] = np.inf
        V_new = Q.min(axis=0)
        diff = np.max(np.abs(V_new - V))
        V = V_new
        if diff < tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_sweeps} sweeps")
    Q = g + discount * (P @ V)
    Q[1, empty] = np.inf
    policy = (Q[1] < Q[0] - tie_tol).astype(np.int64)
    return ValueFunction(V, policy, Q, discount, multiplier, sweep, model.shape)


@dataclass(frozen=True)
class ThresholdPolicy:
    """Per ``(c, y)`` thresholds; a mixture also carries ``upper`` and ``q``."""

    lower: np.ndarray           # b_1(c, y); capacity + 1 means never transmit
    upper: np.ndarray | None = None
    q: np.ndarray | None = None
    violations: tuple = ()

    @property
    def is_mixture(self) -> bool:
        return self.upper is not None

    @property
    def monotone(self) -> bool:
        return not self.violations

    def transmit_prob(self, b, c, y) -> float:
        if b == 0:
            return 0.0
        if not self.is_mixture:
            return float(b >= self.lower[c, y])
        q = self.q[c, y]
        return q * float(b >= self.lower[c, y]) + (1.0 - q) * float(b >= self.upper[c, y])

    def theta(self, model: TxModel) -> np.ndarray:
        """Flat action-probability vector for ``flatten_to_mdp(model)``."""
        out = []
        for b, c, y in np.ndindex(*model.shape):
            if b == 0:
                out.append(1.0)
            else:
                p = self.transmit_prob(b, c, y)
                out.extend((1.0 - p, p))
        return np.array(out)


def extract_thresholds(policy, model: TxModel) -> ThresholdPolicy:
    """Switch index per ``(c, y)`` plus a list of states breaking monotonicity in ``b``."""
    if isinstance(policy, ValueFunction):
        policy = policy.policy
    table = np.asarray(policy).reshape(model.shape)
    cap = model.capacity
    lower = np.full(model.shape[1:], cap + 1, dtype=np.int64)
    bad = []
    for c, y in np.ndindex(*model.shape[1:]):
        col = table[1:, c, y]
        on = np.nonzero(col)[0]
        if on.size:
            lower[c, y] = on[0] + 1
            off_after = np.nonzero(col[on[0]:] == 0)[0]
            bad.extend((int(on[0] + 1 + k), c, y) for k in off_after)
    return ThresholdPolicy(lower, violations=tuple(bad))


def evaluate(model: TxModel, theta, mdp: MdpModel | None = None):
    """Exact average ``(cost, delay)`` of a flat policy vector."""
    mdp = flatten_to_mdp(model) if mdp is None else mdp
    ex = analyze(mdp, theta)
    return float(ex.values[0]), float(ex.values[1]) + model.bound


def transmit_theta(model: TxModel, transmit_prob) -> np.ndarray:
    """Flat policy vector from per-state transmit probabilities (ignored at ``b = 0``)."""
    p = np.asarray(transmit_prob, dtype=float).ravel()
    b = np.indices(model.shape).reshape(3, -1)[0]
    out = []
    for s in range(p.size):
        if b[s] == 0:
            out.append(1.0)
        else:
            out.extend((1.0 - p[s], p[s]))
    return np.array(out)


@dataclass(frozen=True)
class MixtureResult:
    policy: ThresholdPolicy     # thresholds read off the two greedy policies
    theta: np.ndarray           # flat randomized policy that was evaluated
    cost: float
    delay: float
    lam_low: float
    lam_high: float
    pure: tuple                 # ((cost, delay) of the low-lambda policy, same for high)


def calibrate_mixture(model: TxModel, discount: float = 0.99, grid=None,
                      tol: float = 1e-6) -> MixtureResult:
    """Mix the greedy policies of two adjacent multipliers so the delay bound holds with equality.

    The grid is swept upwards until the greedy policy's exact delay drops to
    the bound.  One mixing weight ``q`` is used for every state; it starts
    from linear interpolation of the two exact delay values and is refined by
    root finding on the exact delay of the randomized policy.  The greedy
    policies themselves are mixed, so a threshold violation changes the
    reported thresholds but never the evaluated policy.
    """
    st = stability_check(model)
    if not st.stable:
        raise CalibrationError(f"stability condition fails: {st.lhs:.4g} >= {st.rhs:.4g}")
    grid = np.logspace(-3, 2, 61) if grid is None else np.sort(np.asarray(grid, dtype=float))
    mdp = flatten_to_mdp(model)
    prev = None
    for lam in grid:
        u = value_iteration(model, lam, discount).policy
        cd = evaluate(model, transmit_theta(model, u), mdp)
        if cd[1] <= model.bound:
            if prev is None:
                th = extract_thresholds(u, model)
                return MixtureResult(th, transmit_theta(model, u), cd[0], cd[1], lam, lam, (cd, cd))
            return _mix(model, mdp, prev, (lam, u, cd), tol)
        prev = (lam, u, cd)
    raise CalibrationError("multiplier grid does not bracket the delay bound; widen the grid")


def _mix(model, mdp, lo, hi, tol):
    lam_lo, u_lo, cd_lo = lo
    lam_hi, u_hi, cd_hi = hi

    def theta(q):
        return transmit_theta(model, q * u_hi + (1.0 - q) * u_lo)

    def excess(q):
        return evaluate(model, theta(q), mdp)[1] - model.bound

    span = cd_lo[1] - cd_hi[1]
    q = 1.0 if span <= 0 else float(np.clip((cd_lo[1] - model.bound) / span, 0.0, 1.0))
    if abs(excess(q)) > tol:
        q = brentq(excess, 0.0, 1.0, xtol=1e-12, rtol=1e-12)
    t_hi, t_lo = extract_thresholds(u_hi, model), extract_thresholds(u_lo, model)
    thr = ThresholdPolicy(t_hi.lower, t_lo.lower, np.full(t_hi.lower.shape, q),
                          violations=t_hi.violations + t_lo.violations)
    th = theta(q)
    cost, delay = evaluate(model, th, mdp)
    return MixtureResult(thr, th, cost, delay, lam_lo, lam_hi, (cd_lo, cd_hi))


def random_model(rng, K=None, capacity: int = 10) -> TxModel:
    """Random model meeting the monotonicity assumptions and the stability condition."""
    K = int(rng.integers(2, 5)) if K is None else K
    channel = rng.dirichlet(np.ones(K), size=K)
    f = np.sort(rng.uniform(0.2, 1.0, K))
    cost = np.sort(rng.uniform(0.1, 2.0, K))[::-1]
    beta = np.sort(rng.uniform(0.3, 1.5, K))
    gamma = rng.uniform(0.05, 0.5) * beta[0]
    delta = rng.uniform(0.05, 0.9) * f[0] * (1.0 - gamma / beta[0])
    return TxModel(channel, f, cost, beta, delta, gamma, capacity)
