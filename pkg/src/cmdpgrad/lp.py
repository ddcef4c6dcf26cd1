"""Occupation-measure linear program for constrained average-cost MDPs.

Variables are the long-run state-action frequencies ``pi_ia``.  Small LPs are
solved with a dense two-phase revised simplex using Bland's rule.  Larger ones
(the flattened scheduling models) are handed to HiGHS' dual simplex, since
floating-point Bland pivoting stalls on their highly degenerate balance rows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .mdp import MdpModel, NumericalError

FEAS_TOL = 1e-9
SIMPLEX_MAX_VARS = 60
PIVOT_TOL = 1e-7
ZERO_TOL = 1e-10
COST_TOL = 1e-9


@dataclass(frozen=True)
class OccupationLp:
    """``min c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  0 <= x <= 1``."""

    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray

    @property
    def num_vars(self) -> int:
        return int(self.c.size)


@dataclass(frozen=True)
class LpSolution:
    status: str                 # "optimal" or "infeasible"
    x: np.ndarray | None
    value: float
    duals_eq: np.ndarray | None
    duals_ub: np.ndarray | None  # multipliers >= 0 of the <= rows
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def build_lp(model: MdpModel) -> OccupationLp:
    """Balance rows (one per state), normalization, and one row per constraint."""
    S, n = model.num_states, model.num_pairs
    A_eq = np.zeros((S + 1, n))
    A_eq[model.pair_state, np.arange(n)] = 1.0
    A_eq[:S] -= model.pair_transitions.T
    A_eq[S] = 1.0
    b_eq = np.zeros(S + 1)
    b_eq[S] = 1.0
    return OccupationLp(model.cost.copy(), A_eq, b_eq, model.constraints.copy(), model.bounds.copy())


class _Revised:
    """Revised simplex for ``min c.x, A x = b, x >= 0`` with ``b >= 0``.

    Every iteration solves with the basis columns of the original matrix, so
    rounding does not accumulate across the long degenerate runs that the
    balance rows produce.
    """

    def __init__(self, A, b, basis):
        self.A = A
        self.b = b
        self.basis = np.array(list(basis), dtype=np.int64)
        self.iterations = 0

    def basic_solution(self):
        return np.linalg.solve(self.A[:, self.basis], self.b)

    def optimize(self, cost, allowed, max_iter=50_000):
        """Bland's rule; returns ``"optimal"`` or ``"unbounded"``."""
        for _ in range(max_iter):
            B = self.A[:, self.basis]
            xb = np.linalg.solve(B, self.b)
            # snap rounding noise so degenerate ties stay ties (Bland needs exact ties)
            xb[np.abs(xb) < ZERO_TOL] = 0.0
            y = np.linalg.solve(B.T, cost[self.basis])
            reduced = cost - y @ self.A
            cand = allowed & (reduced < -COST_TOL)
            cand[self.basis] = False
            hits = np.flatnonzero(cand)
            if hits.size == 0:
                return "optimal"
            enter = hits[0]
            d = np.linalg.solve(B, self.A[:, enter])
            rows = np.flatnonzero(d > PIVOT_TOL * max(1.0, np.abs(d).max()))
            if rows.size == 0:
                return "unbounded"
            ratios = np.maximum(xb[rows], 0.0) / d[rows]
            tied = rows[ratios <= ratios.min() * (1 + 1e-9)]
            leave = tied[np.argmin(self.basis[tied])]
            self.basis[leave] = enter
            self.iterations += 1
        raise NumericalError("simplex iteration limit reached")


def solve_standard(c, A, b):
    """Two-phase simplex for ``min c.x, A x = b, x >= 0``.

    Returns ``(status, x, y, iterations)`` where ``y`` solves ``B^T y = c_B``
    for the original rows (zero for rows found redundant).
    """
    c = np.asarray(c, dtype=float)
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    m, n = A.shape
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b *= sign
    # phase I with one artificial per row
    T = _Revised(np.hstack([A, np.eye(m)]), b, range(n, n + m))
    aux = np.r_[np.zeros(n), np.ones(m)]
    T.optimize(aux, np.ones(n + m, dtype=bool))
    xb = T.basic_solution()
    if aux[T.basis] @ xb > FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
        return "infeasible", None, None, T.iterations
    # drive artificials out of the basis; rows where that is impossible are redundant
    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if T.basis[r] < n:
            continue
        row = np.linalg.solve(T.A[:, T.basis].T, np.eye(m)[r]) @ A
        row[T.basis[T.basis < n]] = 0.0
        cand = np.flatnonzero(np.abs(row) > 1e-9)
        if cand.size:
            T.basis[r] = cand[0]
        else:
            keep[r] = False
    rows = np.flatnonzero(keep)
    T2 = _Revised(A[rows], b[rows], T.basis[rows])
    T2.iterations = T.iterations
    status = T2.optimize(c, np.ones(n, dtype=bool))
    if status != "optimal":
        return status, None, None, T2.iterations
    x = np.zeros(n)
    x[T2.basis] = T2.basic_solution()
    x[np.abs(x) < 1e-13] = 0.0
    y_rows = np.linalg.solve(A[rows][:, T2.basis].T, c[T2.basis])
    y = np.zeros(m)
    y[rows] = y_rows
    return "optimal", x, y * sign, T2.iterations


def solve_lp(lp: OccupationLp, method: str = "auto") -> LpSolution:
    """Optimal occupation measure, value and duals (``<=`` multipliers reported as ``>= 0``).

    ``method`` is ``"simplex"`` (in-house), ``"highs"`` or ``"auto"``; the
    latter uses the in-house solver up to ``SIMPLEX_MAX_VARS`` variables and
    falls back to HiGHS if it fails.
    """
    if method == "highs":
        return _solve_highs(lp)
    if method == "auto":
        if lp.num_vars > SIMPLEX_MAX_VARS:
            return _solve_highs(lp)
        try:
            return _solve_simplex(lp)
        except (NumericalError, np.linalg.LinAlgError):
            return _solve_highs(lp)
    if method != "simplex":
        raise ValueError(f"unknown method {method!r}")
    return _solve_simplex(lp)


def _solve_highs(lp: OccupationLp) -> LpSolution:
    L = lp.b_ub.size
    res = linprog(lp.c, A_ub=lp.A_ub if L else None, b_ub=lp.b_ub if L else None,
                  A_eq=lp.A_eq, b_eq=lp.b_eq, bounds=(0, None), method="highs-ds")
    if res.status == 2:
        return LpSolution("infeasible", None, float("nan"), None, None, int(res.nit))
    if res.status != 0:
        raise NumericalError(f"HiGHS failed: {res.message}")
    pi = np.where(np.abs(res.x) < 1e-13, 0.0, res.x)
    duals_ub = -res.ineqlin.marginals if L else np.zeros(0)
    return LpSolution("optimal", pi, float(lp.c @ pi), res.eqlin.marginals, duals_ub, int(res.nit))


def _solve_simplex(lp: OccupationLp) -> LpSolution:
    n = lp.num_vars
    L = lp.b_ub.size
    m_eq = lp.b_eq.size
    A = np.zeros((m_eq + L, n + L))
    A[:m_eq, :n] = lp.A_eq
    A[m_eq:, :n] = lp.A_ub
    A[m_eq:, n:] = np.eye(L)
    b = np.r_[lp.b_eq, lp.b_ub]
    c = np.r_[lp.c, np.zeros(L)]
    status, x, y, it = solve_standard(c, A, b)
    if status == "unbounded":
        raise AssertionError("occupation LP cannot be unbounded: variables lie in the simplex")
    if status != "optimal":
        return LpSolution(status, None, float("nan"), None, None, it)
    pi = x[:n]
    return LpSolution("optimal", pi, float(lp.c @ pi), y[:m_eq], -y[m_eq:], it)


def theta_from_pi(pi, action_counts, tol: float = 1e-12) -> np.ndarray:
    """Conditional action frequencies; unvisited states get a uniform row (with a warning)."""
    counts = np.asarray(action_counts, dtype=np.int64)
    offs = np.concatenate(([0], np.cumsum(counts)))
    pi = np.clip(np.asarray(pi, dtype=float), 0.0, None)
    out = np.empty_like(pi)
    empty = []
    for i in range(counts.size):
        seg = pi[offs[i]:offs[i + 1]]
        tot = seg.sum()
        if tot <= tol:
            out[offs[i]:offs[i + 1]] = 1.0 / counts[i]
            empty.append(i)
        else:
            out[offs[i]:offs[i + 1]] = seg / tot
    if empty:
        warnings.warn(f"states {empty} have zero occupation; uniform rows used", RuntimeWarning)
    return out


def randomized_states(theta, action_counts, pi=None, tol: float = 1e-9):
    """States whose row is not a point mass.

    With ``pi`` given, states of zero occupation are skipped: their rows are
    arbitrary fill, not decisions of the optimal policy.
    """
    counts = np.asarray(action_counts, dtype=np.int64)
    offs = np.concatenate(([0], np.cumsum(counts)))
    theta = np.asarray(theta)
    out = []
    for i in range(counts.size):
        if pi is not None and np.sum(pi[offs[i]:offs[i + 1]]) <= 1e-12:
            continue
        if np.sum(theta[offs[i]:offs[i + 1]] > tol) > 1:
            out.append(i)
    return out


def solve_model(model: MdpModel, method: str = "auto"):
    """Convenience: LP solution plus the induced policy table."""
    sol = solve_lp(build_lp(model), method)
    theta = theta_from_pi(sol.x, model.action_counts) if sol.optimal else None
    return sol, theta
