"""Randomized policy parameterizations.

Two parameterizations are supported:

* spherical angles ``alpha``: for a state with actions ``0..d`` there are
  ``d`` angles and ``theta_a`` is the squared ``a``-th coordinate of a point
  on the unit sphere, so any angle vector gives a valid distribution;
* exponential (softmax) weights ``psi``, one per state-action pair.

Tables are stored flat over state-action pairs (row-major by state, then
action) and angle vectors flat over "components" ``(i, p)``, ``p = 1..d(i)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HALF_PI = 0.5 * np.pi


class BoundaryError(ValueError):
    """Raised when an angle sits on the boundary where a formula is undefined."""


class PolicyValidationError(ValueError):
    pass


def pair_offsets(action_counts) -> np.ndarray:
    counts = np.asarray(action_counts, dtype=np.int64)
    return np.concatenate(([0], np.cumsum(counts))).astype(np.int64)


def component_offsets(action_counts) -> np.ndarray:
    counts = np.asarray(action_counts, dtype=np.int64)
    return np.concatenate(([0], np.cumsum(counts - 1))).astype(np.int64)


def component_labels(action_counts):
    """List of ``(state, p)`` with ``p`` 1-based, in flat component order."""
    return [(i, p) for i, n in enumerate(action_counts) for p in range(1, int(n))]


def _row_from_factors(s2, c2):
    # theta_0 = c2[0]; theta_a = c2[a] * prod(s2[:a]); theta_d = prod(s2)
    d = len(s2)
    prefix = np.concatenate(([1.0], np.cumprod(s2)))
    row = np.empty(d + 1)
    row[:d] = c2 * prefix[:d]
    row[d] = prefix[d]
    return row


def theta_row(alpha_row) -> np.ndarray:
    """Action probabilities of one state from its ``d`` angles."""
    a = np.asarray(alpha_row, dtype=float)
    if a.size == 0:
        return np.ones(1)
    s = np.sin(a)
    c = np.cos(a)
    return _row_from_factors(s * s, c * c)


def theta_row_jacobian(alpha_row) -> np.ndarray:
    """d(theta_u)/d(alpha_p) for one state, shape ``(d+1, d)``.

    Uses the product rule directly (each theta_u holds at most one factor in
    alpha_p), so it stays exact on the boundary of the angle box.
    """
    a = np.asarray(alpha_row, dtype=float)
    d = a.size
    s = np.sin(a)
    c = np.cos(a)
    s2, c2 = s * s, c * c
    ds = 2.0 * s * c
    jac = np.zeros((d + 1, d))
    for p in range(d):
        s2p = s2.copy()
        c2p = c2.copy()
        s2p[p] = ds[p]
        c2p[p] = -ds[p]
        col = _row_from_factors(s2p, c2p)
        col[:p] = 0.0
        jac[:, p] = col
    return jac


def theta_from_alpha(alpha, action_counts) -> np.ndarray:
    """Flat action-probability table from a flat angle vector."""
    counts = np.asarray(action_counts, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=float)
    coffs = component_offsets(counts)
    if alpha.size != coffs[-1]:
        raise PolicyValidationError(f"expected {coffs[-1]} angles, got {alpha.size}")
    return np.concatenate([theta_row(alpha[coffs[i]:coffs[i + 1]]) for i in range(counts.size)])


def theta_jacobian(alpha, action_counts) -> np.ndarray:
    """Dense Jacobian d(theta)/d(alpha), shape ``(n_pairs, n_components)``."""
    counts = np.asarray(action_counts, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=float)
    offs = pair_offsets(counts)
    coffs = component_offsets(counts)
    jac = np.zeros((offs[-1], coffs[-1]))
    for i in range(counts.size):
        if counts[i] > 1:
            jac[offs[i]:offs[i + 1], coffs[i]:coffs[i + 1]] = theta_row_jacobian(alpha[coffs[i]:coffs[i + 1]])
    return jac


def alpha_from_theta(theta_row_, tol: float = 1e-9) -> np.ndarray:
    """Invert the spherical map for one row; angles land in ``[0, pi/2]``.

    Once the remaining tail mass is zero the leftover angles are
    unconstrained and set to ``pi/4``.
    """
    t = np.asarray(theta_row_, dtype=float)
    if t.ndim != 1 or t.size < 1:
        raise PolicyValidationError("theta row must be a non-empty vector")
    if np.any(t < -tol) or abs(t.sum() - 1.0) > tol:
        raise PolicyValidationError(f"theta row is not a probability vector: {t}")
    t = np.clip(t, 0.0, None)
    tail = np.cumsum(t[::-1])[::-1]  # tail[p] = sum_{u >= p} theta_u
    d = t.size - 1
    out = np.empty(d)
    for p in range(1, d + 1):
        head = t[p - 1]
        rest = tail[p]
        if head <= 0.0 and rest <= 0.0:
            out[p - 1] = 0.25 * np.pi
        else:
            out[p - 1] = np.arctan2(np.sqrt(rest), np.sqrt(head))
    return out


def alpha_from_theta_table(theta, action_counts) -> np.ndarray:
    counts = np.asarray(action_counts, dtype=np.int64)
    offs = pair_offsets(counts)
    theta = np.asarray(theta, dtype=float)
    return np.concatenate(
        [alpha_from_theta(theta[offs[i]:offs[i + 1]]) for i in range(counts.size)]
    ) if counts.size else np.zeros(0)


def softmax_rows(psi, action_counts) -> np.ndarray:
    counts = np.asarray(action_counts, dtype=np.int64)
    offs = pair_offsets(counts)
    psi = np.asarray(psi, dtype=float)
    out = np.empty_like(psi)
    for i in range(counts.size):
        seg = psi[offs[i]:offs[i + 1]]
        e = np.exp(seg - seg.max())
        out[offs[i]:offs[i + 1]] = e / e.sum()
    return out


def generalized_gradient_weights(theta_row_) -> np.ndarray:
    """Softmax chain-rule weights ``W[u, a] = d theta_u / d psi_a``."""
    t = np.asarray(theta_row_, dtype=float)
    return np.diag(t) - np.outer(t, t)


@dataclass(frozen=True)
class SphericalPolicy:
    """Angle-parameterized randomized policy."""

    alpha: np.ndarray
    action_counts: np.ndarray
    mu: float = 1e-6
    _theta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        counts = np.asarray(self.action_counts, dtype=np.int64)
        alpha = np.asarray(self.alpha, dtype=float).copy()
        if alpha.size != int((counts - 1).sum()):
            raise PolicyValidationError("alpha length does not match action counts")
        alpha.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "action_counts", counts)
        object.__setattr__(self, "_theta", theta_from_alpha(alpha, counts))

    @classmethod
    def from_theta(cls, theta, action_counts, mu: float = 1e-6) -> "SphericalPolicy":
        return cls(alpha_from_theta_table(theta, action_counts), action_counts, mu)

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @property
    def comp_offsets(self) -> np.ndarray:
        return component_offsets(self.action_counts)

    @property
    def offsets(self) -> np.ndarray:
        return pair_offsets(self.action_counts)

    def state_alpha(self, i: int) -> np.ndarray:
        co = self.comp_offsets
        return self.alpha[co[i]:co[i + 1]]

    def state_theta(self, i: int) -> np.ndarray:
        off = self.offsets
        return self.theta[off[i]:off[i + 1]]

    def jacobian(self) -> np.ndarray:
        return theta_jacobian(self.alpha, self.action_counts)

    def with_alpha(self, alpha) -> "SphericalPolicy":
        return SphericalPolicy(alpha, self.action_counts, self.mu)


@dataclass(frozen=True)
class ExponentialPolicy:
    """Softmax policy ``theta_ia = exp(psi_ia) / sum_u exp(psi_iu)``."""

    psi: np.ndarray
    action_counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.action_counts, dtype=np.int64)
        psi = np.asarray(self.psi, dtype=float).copy()
        if psi.size != int(counts.sum()):
            raise PolicyValidationError("psi length does not match action counts")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "action_counts", counts)

    @classmethod
    def from_theta(cls, theta, action_counts) -> "ExponentialPolicy":
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0):
            raise BoundaryError("softmax cannot represent zero probabilities")
        return cls(np.log(theta), action_counts)

    @property
    def theta(self) -> np.ndarray:
        return softmax_rows(self.psi, self.action_counts)


def sample_action(policy: SphericalPolicy, i: int, rng) -> int:
    """Draw an action through the nested Bernoulli cascade.

    Starting from ``p = 1``: stop at action ``p-1`` with probability
    ``cos^2(alpha_ip)``, otherwise move on; surviving all ``d`` stages
    yields action ``d``.
    """
    a = policy.state_alpha(i)
    for p in range(a.size):
        if rng.random() < np.cos(a[p]) ** 2:
            return p
    return int(a.size)


def phantom_law(alpha_row, p: int) -> np.ndarray:
    """Distribution of the phantom action ``Y_p`` over ``0..d`` (support ``u >= p``)."""
    a = np.asarray(alpha_row, dtype=float)
    t = theta_row(a)
    norm = np.prod(np.sin(a[:p]) ** 2)
    if norm <= 0.0:
        raise BoundaryError(f"phantom law undefined: prefix sin^2 product is 0 at p={p}")
    law = np.zeros_like(t)
    law[p:] = t[p:] / norm
    return law


def phantom_rule(alpha_row, a: int):
    """Deterministic part of the phantom spawn for observed action ``a``.

    Returns ``(p, K, law)`` with ``p`` 1-based, ``K`` the weight factor and
    ``law`` the distribution of the phantom action, or ``None`` when the
    state has a single action.
    """
    al = np.asarray(alpha_row, dtype=float)
    d = al.size
    if d == 0:
        return None
    if a < 0 or a > d:
        raise PolicyValidationError(f"action {a} outside 0..{d}")
    if a <= d - 2:
        p = a + 1
        return p, -np.tan(al[p - 1]), phantom_law(al, p)
    cs = np.cos(al[d - 1]) * np.sin(al[d - 1])
    law = np.zeros(d + 1)
    if a == d - 1:
        law[d] = 1.0
        return d, -cs, law
    law[d - 1] = 1.0
    return d, cs, law


def phantom_action(policy: SphericalPolicy, i: int, a: int, rng):
    """Spawn rule for a visit to ``(i, a)``: returns ``(p, u_tilde, K)``."""
    rule = phantom_rule(policy.state_alpha(i), a)
    if rule is None:
        return None
    p, k, law = rule
    u = int(rng.choice(law.size, p=law))
    return p, u, k


def _cdf_rows(prob_rows, width):
    """Inverse-CDF table whose last positive entry (and beyond) is exactly 1."""
    n = len(prob_rows)
    cdf = np.ones((n, max(width, 1)))
    for r, row in enumerate(prob_rows):
        row = np.asarray(row, dtype=float)
        c = np.cumsum(row)
        pos = np.nonzero(row > 0)[0]
        last = pos[-1] if pos.size else row.size - 1
        c[last:] = 1.0
        cdf[r, :row.size] = c
    return cdf


@dataclass(frozen=True)
class PhantomTables:
    """Per-pair spawn data consumed by the phantom kernel."""

    comp_of_pair: np.ndarray   # global component index or -1
    k_of_pair: np.ndarray      # K factor (0 when no phantom is spawned)
    phantom_cdf: np.ndarray    # (n_pairs, max actions) inverse-CDF of the phantom action
    comp_offsets: np.ndarray   # (S+1,) start of each state's components
    scale_num: float           # estimator scale numerator (2 for angles, 1 for psi)
    n_components: int
    max_local: int


def spherical_phantom_tables(alpha, action_counts) -> PhantomTables:
    counts = np.asarray(action_counts, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=float)
    coffs = component_offsets(counts)
    width = int(counts.max())
    comp = []
    ks = []
    laws = []
    for i, n in enumerate(counts):
        ar = alpha[coffs[i]:coffs[i + 1]]
        for a in range(int(n)):
            rule = phantom_rule(ar, a) if n > 1 else None
            if rule is None:
                comp.append(-1)
                ks.append(0.0)
                laws.append(np.ones(1))
                continue
            p, k, law = rule
            comp.append(int(coffs[i] + p - 1))
            ks.append(float(k))
            laws.append(law)
    return PhantomTables(
        comp_of_pair=np.asarray(comp, dtype=np.int64),
        k_of_pair=np.asarray(ks, dtype=float),
        phantom_cdf=_cdf_rows(laws, width),
        comp_offsets=coffs,
        scale_num=2.0,
        n_components=int(coffs[-1]),
        max_local=int((counts - 1).max()),
    )


def canonical_phantom_tables(theta, action_counts) -> PhantomTables:
    """Spawn data for the gradient in softmax (psi) coordinates.

    A visit to ``(i, a)`` spawns a phantom for component ``psi_ia`` with
    weight ``1 - theta_ia`` and phantom action drawn from ``theta_i``
    restricted to ``u != a``.
    """
    counts = np.asarray(action_counts, dtype=np.int64)
    theta = np.asarray(theta, dtype=float)
    offs = pair_offsets(counts)
    width = int(counts.max())
    comp = []
    ks = []
    laws = []
    for i, n in enumerate(counts):
        row = theta[offs[i]:offs[i + 1]]
        for a in range(int(n)):
            rest = row.copy()
            rest[a] = 0.0
            mass = rest.sum()
            if n == 1 or mass <= 0.0:
                comp.append(-1)
                ks.append(0.0)
                laws.append(np.ones(1))
                continue
            comp.append(int(offs[i] + a))
            ks.append(float(1.0 - row[a]))
            laws.append(rest / mass)
    return PhantomTables(
        comp_of_pair=np.asarray(comp, dtype=np.int64),
        k_of_pair=np.asarray(ks, dtype=float),
        phantom_cdf=_cdf_rows(laws, width),
        comp_offsets=offs,
        scale_num=1.0,
        n_components=int(offs[-1]),
        max_local=int(counts.max()),
    )


def action_cdf_table(theta, action_counts) -> np.ndarray:
    counts = np.asarray(action_counts, dtype=np.int64)
    offs = pair_offsets(counts)
    theta = np.asarray(theta, dtype=float)
    return _cdf_rows([theta[offs[i]:offs[i + 1]] for i in range(counts.size)], int(counts.max()))
