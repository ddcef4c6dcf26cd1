"""Finite constrained MDP model and exact analytic oracles.

State-action pairs are indexed flat, row-major by state then action.  Under a
randomized stationary policy the pair process ``Z_n = (X_n, u_n)`` is a
homogeneous Markov chain; stationary distribution, Poisson potentials and
exact gradients are computed on that augmented chain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import policy as pol
from ._backend import kernels


class ModelError(ValueError):
    """Structural problem with a model or a policy table."""


class UnichainError(RuntimeError):
    """The augmented chain does not have a single recurrent class."""


class NumericalError(RuntimeError):
    pass


ROW_TOL = 1e-12


@dataclass(frozen=True)
class MdpModel:
    """Finite MDP with per-state action sets.

    ``pair_transitions[z, j]`` is ``A_ij(a)`` for pair ``z = (i, a)``;
    ``cost`` and each row of ``constraints`` are functions over pairs.
    """

    action_counts: np.ndarray
    pair_transitions: np.ndarray
    cost: np.ndarray
    constraints: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.action_counts, dtype=np.int64)
        tr = np.asarray(self.pair_transitions, dtype=float)
        cost = np.asarray(self.cost, dtype=float).ravel()
        n_pairs = int(counts.sum())
        cons = np.asarray(self.constraints, dtype=float).reshape(-1, n_pairs) if n_pairs else np.zeros((0, 0))
        bounds = np.asarray(self.bounds, dtype=float).ravel()
        if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
            raise ModelError("every state needs at least one action")
        if tr.shape != (n_pairs, counts.size):
            raise ModelError(f"transition table must be {(n_pairs, counts.size)}, got {tr.shape}")
        if np.any(tr < 0) or not np.all(np.isfinite(tr)):
            raise ModelError("transition probabilities must be finite and nonnegative")
        if np.max(np.abs(tr.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ModelError("transition rows must sum to 1")
        if cost.size != n_pairs:
            raise ModelError("cost needs one entry per state-action pair")
        if cons.shape[0] != bounds.size:
            raise ModelError("one bound per constraint is required")
        if not (np.all(np.isfinite(cost)) and np.all(np.isfinite(cons)) and np.all(np.isfinite(bounds))):
            raise ModelError("costs, constraints and bounds must be finite")
        for name, arr in (("action_counts", counts), ("pair_transitions", tr), ("cost", cost),
                          ("constraints", cons), ("bounds", bounds)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_dense(cls, transitions, cost, constraints=(), bounds=(), action_counts=None):
        """Build from per-action ``S x S`` matrices and ``S x U`` tables.

        ``action_counts`` restricts state ``i`` to actions ``0..n_i-1``;
        entries for unavailable actions are ignored (they may be NaN).
        """
        A = np.asarray(transitions, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ModelError("transitions must have shape (U, S, S)")
        n_act, n_states, _ = A.shape
        counts = np.full(n_states, n_act, dtype=np.int64) if action_counts is None else np.asarray(action_counts, dtype=np.int64)
        if counts.size != n_states or np.any(counts > n_act) or np.any(counts < 1):
            raise ModelError("action_counts incompatible with transitions")
        c = np.asarray(cost, dtype=float)
        if c.shape != (n_states, n_act):
            raise ModelError(f"cost must have shape {(n_states, n_act)}")
        b = np.asarray(constraints, dtype=float).reshape(-1, n_states, n_act) if np.size(constraints) else np.zeros((0, n_states, n_act))
        rows, cz, bz = [], [], []
        for i in range(n_states):
            for a in range(int(counts[i])):
                rows.append(A[a, i])
                cz.append(c[i, a])
                bz.append(b[:, i, a])
        cons = np.array(bz, dtype=float).reshape(len(rows), b.shape[0]).T
        return cls(counts, np.array(rows), np.array(cz), cons, np.asarray(bounds, dtype=float))

    @property
    def num_states(self) -> int:
        return int(self.action_counts.size)

    @property
    def num_pairs(self) -> int:
        return int(self.pair_transitions.shape[0])

    @property
    def num_constraints(self) -> int:
        return int(self.bounds.size)

    @property
    def num_components(self) -> int:
        return int((self.action_counts - 1).sum())

    @property
    def offsets(self) -> np.ndarray:
        return pol.pair_offsets(self.action_counts)

    @property
    def comp_offsets(self) -> np.ndarray:
        return pol.component_offsets(self.action_counts)

    @property
    def pair_state(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_states), self.action_counts)

    @property
    def pair_action(self) -> np.ndarray:
        offs = self.offsets
        return np.arange(self.num_pairs) - offs[self.pair_state]

    def pair_index(self, i: int, a: int) -> int:
        if not (0 <= a < self.action_counts[i]):
            raise ModelError(f"action {a} not available in state {i}")
        return int(self.offsets[i] + a)

    def objectives(self) -> np.ndarray:
        """Stack ``[c; beta_1; ...; beta_L]`` over pairs, shape ``(1+L, n_pairs)``."""
        return np.vstack([self.cost[None, :], self.constraints])

    def table(self, values, fill=np.nan) -> np.ndarray:
        """Pad a flat per-pair vector into an ``S x max_actions`` table."""
        values = np.asarray(values, dtype=float)
        out = np.full((self.num_states, int(self.action_counts.max())), fill)
        out[self.pair_state, self.pair_action] = values
        return out

    def flat_theta(self, theta) -> np.ndarray:
        """Accept a flat or ``S x U`` action-probability table; validate and return flat."""
        t = np.asarray(theta, dtype=float)
        if t.ndim == 2:
            if t.shape[0] != self.num_states:
                raise ModelError("theta table has wrong number of states")
            if t.shape[1] < self.action_counts.max():
                raise ModelError("theta table has too few action columns")
            t = t[self.pair_state, self.pair_action]
        if t.shape != (self.num_pairs,):
            raise ModelError(f"theta must have {self.num_pairs} entries")
        if np.any(t < -1e-12):
            raise ModelError("theta entries must be nonnegative")
        sums = np.add.reduceat(t, self.offsets[:-1])
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ModelError("theta rows must sum to 1")
        return np.clip(t, 0.0, None)

    def with_transitions(self, pair_transitions) -> "MdpModel":
        return MdpModel(self.action_counts, pair_transitions, self.cost, self.constraints, self.bounds)


@dataclass(frozen=True)
class AugmentedKernel:
    """Transition matrix of the pair chain plus its index map."""

    matrix: np.ndarray
    pair_state: np.ndarray
    pair_action: np.ndarray

    def index(self, i: int, a: int) -> int:
        hits = np.nonzero((self.pair_state == i) & (self.pair_action == a))[0]
        if hits.size == 0:
            raise ModelError(f"no pair ({i}, {a})")
        return int(hits[0])


@dataclass(frozen=True)
class PotentialVector:
    values: np.ndarray
    residual: float
    normalization: str = "pi.g = 0"


def _policy_theta(model: MdpModel, policy) -> np.ndarray:
    if hasattr(policy, "theta"):
        return model.flat_theta(policy.theta)
    return model.flat_theta(policy)


def build_augmented_kernel(model: MdpModel, theta) -> AugmentedKernel:
    """``P[(i,a),(j,b)] = A_ij(a) * theta_jb``."""
    t = _policy_theta(model, theta)
    ps = model.pair_state
    P = model.pair_transitions[:, ps] * t[None, :]
    return AugmentedKernel(P, ps, model.pair_action)


def _matrix(kernel) -> np.ndarray:
    return kernel.matrix if isinstance(kernel, AugmentedKernel) else np.asarray(kernel, dtype=float)


def recurrent_classes(P: np.ndarray, tol: float = 0.0):
    """Closed communicating classes of the support graph of ``P``."""
    adj = csr_matrix(P > tol)
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    closed = []
    for k in range(n_comp):
        members = np.nonzero(labels == k)[0]
        out = adj[members].indices
        if np.all(labels[out] == k):
            closed.append(members)
    return closed


def stationary_distribution(kernel) -> np.ndarray:
    """Unique invariant probability vector of a unichain kernel."""
    P = _matrix(kernel)
    n = P.shape[0]
    classes = recurrent_classes(P)
    if len(classes) != 1:
        raise UnichainError(f"kernel has {len(classes)} closed classes; a single recurrent class is required")
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise UnichainError(f"singular normalized balance system: {exc}") from exc
    if not np.all(np.isfinite(pi)) or np.min(pi) < -1e-9:
        raise UnichainError("stationary solve produced an invalid vector")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def expected_cost(pi, f) -> float:
    pi = np.asarray(pi, dtype=float)
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != pi.size:
        raise ModelError("dimension mismatch between pi and f")
    return f @ pi


def constraint_values(model: MdpModel, pi) -> np.ndarray:
    """``B_l = pi . beta_l - gamma_l``."""
    return model.constraints @ np.asarray(pi) - model.bounds


def potential_vector(kernel, pi, f) -> PotentialVector:
    """Solve ``(I - P) g = f - (pi f) 1`` with ``pi g = 0``."""
    P = _matrix(kernel)
    pi = np.asarray(pi, dtype=float)
    f = np.asarray(f, dtype=float)
    n = P.shape[0]
    h = f - (pi @ f)
    M = np.eye(n) - P + np.outer(np.ones(n), pi)
    try:
        g = np.linalg.solve(M, h)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Poisson system singular: {exc}") from exc
    res = float(np.max(np.abs((np.eye(n) - P) @ g - h))) if n else 0.0
    if not np.isfinite(res):
        raise NumericalError("Poisson solve produced non-finite values")
    return PotentialVector(g, res)


def _check_interior(alpha_ip: float):
    if not (0.0 < alpha_ip < 0.5 * np.pi):
        raise pol.BoundaryError(f"angle {alpha_ip} is on the boundary of [0, pi/2]")


def derivative_kernel(model: MdpModel, alpha, component) -> np.ndarray:
    """``Q = dP/d alpha_ip`` for component ``(i, p)`` (``p`` 1-based)."""
    i, p = component
    alpha = np.asarray(alpha, dtype=float)
    coffs = model.comp_offsets
    d = int(model.action_counts[i]) - 1
    if not (1 <= p <= d):
        raise ModelError(f"component ({i}, {p}) does not exist")
    arow = alpha[coffs[i]:coffs[i + 1]]
    _check_interior(arow[p - 1])
    dtheta = np.zeros(model.num_pairs)
    offs = model.offsets
    dtheta[offs[i]:offs[i + 1]] = pol.theta_row_jacobian(arow)[:, p - 1]
    return model.pair_transitions[:, model.pair_state] * dtheta[None, :]


@dataclass(frozen=True)
class ExactAnalysis:
    """Everything the oracles need at one policy."""

    theta: np.ndarray
    kernel: AugmentedKernel
    pi: np.ndarray
    values: np.ndarray          # (1+L,) C and B_l
    potentials: np.ndarray      # (1+L, n_pairs)

    @property
    def state_pi(self) -> np.ndarray:
        return np.bincount(self.kernel.pair_state, weights=self.pi)


def analyze(model: MdpModel, theta) -> ExactAnalysis:
    t = _policy_theta(model, theta)
    ker = build_augmented_kernel(model, t)
    pi = stationary_distribution(ker)
    F = model.objectives()
    vals = F @ pi
    vals[1:] -= model.bounds
    G = np.array([potential_vector(ker, pi, f).values for f in F])
    return ExactAnalysis(t, ker, pi, vals, G)


def _objective_rows(model: MdpModel, f):
    if f is None:
        return model.objectives(), True
    f = np.asarray(f, dtype=float)
    return (f[None, :] if f.ndim == 1 else f), f.ndim == 2


def exact_gradient(model: MdpModel, alpha, f=None, check: bool = False) -> np.ndarray:
    """Gradient of ``pi . f`` w.r.t. the flat angle vector, via ``pi Q g``.

    ``f`` defaults to all objectives (cost then constraints), giving shape
    ``(1+L, n_components)``; a single vector ``f`` gives a flat vector.
    With ``check=True`` the realization-factor form is evaluated too and
    the two must agree to 1e-10 (relative).
    """
    alpha = np.asarray(alpha, dtype=float)
    rows, two_d = _objective_rows(model, f)
    theta = pol.theta_from_alpha(alpha, model.action_counts)
    ker = build_augmented_kernel(model, theta)
    pi = stationary_distribution(ker)
    G = np.array([potential_vector(ker, pi, r).values for r in rows])
    out = np.zeros((rows.shape[0], model.num_components))
    for k, (i, p) in enumerate(pol.component_labels(model.action_counts)):
        Q = derivative_kernel(model, alpha, (i, p))
        out[:, k] = (pi @ Q) @ G.T
    if check:
        alt = realization_factor_gradient(model, alpha, f)
        alt = alt if two_d else alt[None, :]
        scale = max(1.0, float(np.max(np.abs(out))))
        if np.max(np.abs(out - alt)) > 1e-10 * scale:
            raise NumericalError("pi Q g and realization-factor gradients disagree")
    return out if two_d else out[0]


def realization_factor_gradient(model: MdpModel, alpha, f=None) -> np.ndarray:
    """Closed form ``-2 tan(alpha_ip) pi_{i,p-1} (g(i,p-1) - E g(i, Y_p))``."""
    alpha = np.asarray(alpha, dtype=float)
    rows, two_d = _objective_rows(model, f)
    theta = pol.theta_from_alpha(alpha, model.action_counts)
    ker = build_augmented_kernel(model, theta)
    pi = stationary_distribution(ker)
    G = np.array([potential_vector(ker, pi, r).values for r in rows])
    offs = model.offsets
    coffs = model.comp_offsets
    out = np.zeros((rows.shape[0], model.num_components))
    for k, (i, p) in enumerate(pol.component_labels(model.action_counts)):
        arow = alpha[coffs[i]:coffs[i + 1]]
        _check_interior(arow[p - 1])
        law = pol.phantom_law(arow, p)
        gi = G[:, offs[i]:offs[i + 1]]
        rf = gi[:, p - 1] - gi @ law
        out[:, k] = -2.0 * np.tan(arow[p - 1]) * pi[offs[i] + p - 1] * rf
    return out if two_d else out[0]


def exact_psi_gradient(model: MdpModel, theta, f=None) -> np.ndarray:
    """Gradient w.r.t. softmax weights: ``pi_state(i) * sum_u dtheta_u/dpsi_a g(i,u)``."""
    rows, two_d = _objective_rows(model, f)
    an = analyze(model, theta)
    ker, pi, t = an.kernel, an.pi, an.theta
    G = np.array([potential_vector(ker, pi, r).values for r in rows])
    offs = model.offsets
    out = np.zeros((rows.shape[0], model.num_pairs))
    for i in range(model.num_states):
        sl = slice(offs[i], offs[i + 1])
        w = pol.generalized_gradient_weights(t[sl])
        out[:, sl] = pi[sl].sum() * (G[:, sl] @ w)
    return out if two_d else out[0]


def hitting_times(P: np.ndarray, target: int) -> np.ndarray:
    """Expected number of steps (>= 1) to reach ``target`` from each pair."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    keep = np.arange(n) != target
    Psub = P[np.ix_(keep, keep)]
    h_sub = np.linalg.solve(np.eye(n - 1) - Psub, np.ones(n - 1))
    h = np.empty(n)
    h[keep] = h_sub
    h[target] = 1.0 + P[target, keep] @ h_sub
    return h


class Simulator:
    """Seeded simulator of the pair chain, chunk by chunk.

    Each step consumes three uniforms (action, transition, phantom) drawn
    row-wise from one numpy ``Generator``, so chunking never changes the
    sample path.
    """

    def __init__(self, model: MdpModel, theta, rng=None, x0=None, backend=None):
        self.model = model
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.kernels = backend if backend is not None else kernels
        self._offsets = model.offsets
        self._counts = model.action_counts.astype(np.int64)
        self._trans_cdf = pol._cdf_rows(list(model.pair_transitions), model.num_states)
        self.set_theta(theta)
        if x0 is None:
            pi = stationary_distribution(build_augmented_kernel(model, self.theta))
            state_pi = np.bincount(model.pair_state, weights=pi, minlength=model.num_states)
            x0 = int(self.rng.choice(model.num_states, p=state_pi / state_pi.sum()))
        if not (0 <= int(x0) < model.num_states):
            raise ModelError(f"initial state {x0} out of range")
        self.x = int(x0)
        self.t = 0

    def set_theta(self, theta):
        self.theta = _policy_theta(self.model, theta)
        self._action_cdf = pol.action_cdf_table(self.theta, self._counts)

    def set_model(self, model: MdpModel):
        if model.num_pairs != self.model.num_pairs or np.any(model.action_counts != self.model.action_counts):
            raise ModelError("replacement model must have the same state-action structure")
        self.model = model
        self._trans_cdf = pol._cdf_rows(list(model.pair_transitions), model.num_states)

    def run(self, n: int):
        """Advance ``n`` steps; returns ``(states, actions, phantom_uniforms)``."""
        u = self.rng.random((n, 3))
        states = np.empty(n, dtype=np.int64)
        actions = np.empty(n, dtype=np.int64)
        self.x = int(self.kernels.simulate(
            self.x, np.ascontiguousarray(u[:, 0]), np.ascontiguousarray(u[:, 1]),
            self._action_cdf, self._counts, self._offsets, self._trans_cdf, states, actions))
        self.t += n
        return states, actions, np.ascontiguousarray(u[:, 2])


def simulate_trajectory(model: MdpModel, policy, N: int, seed=None, x0=None, backend=None):
    """``N`` steps of ``(X_k, u_k)``; starts from ``x0`` or a stationary draw."""
    if N < 1:
        raise ValueError("N must be >= 1")
    sim = Simulator(model, policy, seed, x0, backend=backend)
    states, actions, _ = sim.run(N)
    return states, actions
