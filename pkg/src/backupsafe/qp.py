"""Dense convex QP solver for controller-rate problems.

    minimize    1/2 u^T P u + q^T u + sum_k p_k delta_k^2
    subject to  a_j^T u >= b_j            (hard rows)
                a_k^T u >= b_k - delta_k  (slack-relaxed rows), delta_k >= 0
                lb <= u <= ub

Solved with the Goldfarb-Idnani dual active-set method: start from the
unconstrained minimizer and repeatedly add the most violated constraint,
dropping active constraints whose multipliers would turn negative. Every
iterate is dual feasible, so when a violated constraint is linearly dependent
on the active set with no droppable multiplier, the problem is infeasible and
that dependency is a Farkas certificate naming the conflicting rows.

Slack variables are rescaled to unit curvature (delta' = sqrt(2 p) delta) so a
penalty of 1e18 does not enter any factorization as 1e18.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"

ACTIVITY_TOL = 1e-10
_DEPENDENCE_TOL = 1e-12


class QpError(ValueError):
    """Malformed QP data (non-symmetric or indefinite P, crossed bounds)."""


@dataclass(frozen=True)
class ConstraintRow:
    """Affine constraint a^T u >= b, optionally relaxed by a penalized slack."""

    a: np.ndarray
    b: float
    slack_penalty: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if not np.all(np.isfinite(a)) or not math.isfinite(self.b):
            raise QpError(f"row {self.label!r} has non-finite data")
        if self.slack_penalty is not None and not self.slack_penalty > 0:
            raise QpError(f"row {self.label!r}: slack penalty must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    def residual(self, u) -> float:
        """a^T u - b; nonnegative when the unrelaxed row holds."""
        return float(self.a @ u) - self.b


@dataclass(frozen=True)
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    ineq: tuple = ()
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        m = P.shape[0]
        if P.shape != (m, m):
            raise QpError("P must be square")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-12:
            raise QpError("P must be symmetric")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise QpError("P must be positive definite") from None
        q = np.asarray(self.q, dtype=float).reshape(m)
        lb = np.full(m, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(m)
        ub = np.full(m, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(m)
        if np.any(lb > ub):
            raise QpError("lb must not exceed ub")
        rows = tuple(self.ineq)
        for row in rows:
            if row.a.shape != (m,):
                raise QpError(f"row {row.label!r} has wrong dimension")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        object.__setattr__(self, "ineq", rows)

    @property
    def dim(self) -> int:
        return self.P.shape[0]


@dataclass(frozen=True)
class QpSolution:
    u: np.ndarray
    slacks: dict
    objective: float
    status: str
    active_set: tuple
    multipliers: dict = field(default_factory=dict)
    infeasible_subset: tuple = ()
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    @property
    def max_slack(self) -> float:
        return max(self.slacks.values(), default=0.0)


@dataclass
class _Lifted:
    G: np.ndarray      # internal Hessian
    c: np.ndarray      # internal linear term
    C: np.ndarray      # constraint matrix, C z >= d
    d: np.ndarray
    labels: list
    scale: np.ndarray  # delta = z[m + k] / scale[k]
    slack_rows: list   # index into problem.ineq for each slack variable


def _row_label(row: ConstraintRow, j: int) -> str:
    return row.label or f"row{j}"


def _lift(p: QpProblem) -> _Lifted:
    m = p.dim
    slack_rows = [j for j, r in enumerate(p.ineq) if r.slack_penalty is not None]
    k = len(slack_rows)
    scale = np.array([math.sqrt(2.0 * p.ineq[j].slack_penalty) for j in slack_rows])
    n = m + k
    G = np.zeros((n, n))
    G[:m, :m] = p.P
    G[m:, m:] = np.eye(k)
    c = np.concatenate([p.q, np.zeros(k)])

    C_rows, d, labels = [], [], []
    slack_pos = {j: i for i, j in enumerate(slack_rows)}
    for j, row in enumerate(p.ineq):
        a = np.zeros(n)
        a[:m] = row.a
        if j in slack_pos:
            a[m + slack_pos[j]] = 1.0 / scale[slack_pos[j]]
        C_rows.append(a)
        d.append(row.b)
        labels.append(_row_label(row, j))
    for i, j in enumerate(slack_rows):
        a = np.zeros(n)
        a[m + i] = 1.0
        C_rows.append(a)
        d.append(0.0)
        labels.append(f"{_row_label(p.ineq[j], j)}:slack")
    for i in range(m):
        if np.isfinite(p.lb[i]):
            a = np.zeros(n)
            a[i] = 1.0
            C_rows.append(a)
            d.append(p.lb[i])
            labels.append(f"lb[{i}]")
        if np.isfinite(p.ub[i]):
            a = np.zeros(n)
            a[i] = -1.0
            C_rows.append(a)
            d.append(-p.ub[i])
            labels.append(f"ub[{i}]")
    C = np.array(C_rows) if C_rows else np.zeros((0, n))
    return _Lifted(G, c, C, np.array(d, dtype=float), labels, scale, slack_rows)


def _finish(p: QpProblem, L: _Lifted, z, active, mult, status, iters, subset=()):
    m = p.dim
    u = z[:m].copy()
    slacks = {}
    for i, j in enumerate(L.slack_rows):
        slacks[_row_label(p.ineq[j], j)] = max(0.0, float(z[m + i] / L.scale[i]))
    obj = 0.5 * float(u @ p.P @ u) + float(p.q @ u)
    for i, j in enumerate(L.slack_rows):
        obj += p.ineq[j].slack_penalty * slacks[_row_label(p.ineq[j], j)] ** 2
    multipliers = {L.labels[j]: 0.0 for j in range(len(L.labels))}
    for j, lam in zip(active, mult):
        multipliers[L.labels[j]] = float(lam)
    return QpSolution(u=u, slacks=slacks, objective=obj, status=status,
                      active_set=tuple(L.labels[j] for j in sorted(active)),
                      multipliers=multipliers, infeasible_subset=tuple(subset),
                      iterations=iters)


def solve(p: QpProblem) -> QpSolution:
    """Solve the QP; deterministic for identical inputs."""
    L = _lift(p)
    G, C, d = L.G, L.C, L.d
    chol = np.linalg.cholesky(G)
    # unconstrained minimizer
    y = solve_triangular(chol, -L.c, lower=True)
    z = solve_triangular(chol.T, y, lower=False)

    active: list[int] = []
    mult: list[float] = []
    max_iter = 100 * (p.dim + len(p.ineq))
    iters = 0

    while True:
        s = C @ z - d
        if active:
            s[active] = np.inf
        if s.size == 0 or s.min() >= -ACTIVITY_TOL:
            return _finish(p, L, z, active, mult, OPTIMAL, iters)
        jp = int(np.argmin(s))  # first index among ties
        n_p = C[jp]
        u_p = 0.0

        while True:
            iters += 1
            if iters > max_iter:
                return _finish(p, L, z, active, mult, MAX_ITERATIONS, iters)
            dvec = solve_triangular(chol, n_p, lower=True)  # J^T n_p with J = L^-T
            if active:
                B = solve_triangular(chol, C[active].T, lower=True)
                Qm, R = np.linalg.qr(B, mode="complete")
                k = len(active)
                Q1, Q2 = Qm[:, :k], Qm[:, k:]
                r = solve_triangular(R[:k, :k], Q1.T @ dvec, lower=False)
                w = Q2 @ (Q2.T @ dvec)
            else:
                r = np.zeros(0)
                w = dvec
            dependent = np.linalg.norm(w) <= _DEPENDENCE_TOL * max(np.linalg.norm(dvec), 1e-300)

            # largest dual step keeping active multipliers nonnegative
            t1, drop = np.inf, -1
            for idx in range(len(active)):
                if r[idx] > 0:
                    ratio = mult[idx] / r[idx]
                    if ratio < t1:
                        t1, drop = ratio, idx

            if dependent:
                if drop < 0:
                    subset = [jp] + [active[i] for i in range(len(active)) if r[i] < -1e-12]
                    return _finish(p, L, z, active, mult, INFEASIBLE, iters,
                                   [L.labels[j] for j in subset])
                mult = [mu - t1 * ri for mu, ri in zip(mult, r)]
                u_p += t1
                del active[drop], mult[drop]
                continue

            zdir = solve_triangular(chol.T, w, lower=False)
            sp = float(n_p @ z) - d[jp]
            t2 = -sp / float(w @ w)
            t = min(t1, t2)
            z = z + t * zdir
            mult = [mu - t * ri for mu, ri in zip(mult, r)]
            u_p += t
            if t2 <= t1:
                active.append(jp)
                mult.append(u_p)
                break
            del active[drop], mult[drop]


def kkt_residual(p: QpProblem, s: QpSolution) -> float:
    """Worst of stationarity, primal, dual and complementarity violations.

    Stationarity is measured relative to the magnitude of the gradient terms;
    complementarity as |lambda_j slack_j| / max(1, |lambda_j|), so rows with very
    large multipliers (high slack penalties) are judged by their activity.
    """
    L = _lift(p)
    z = np.concatenate([np.asarray(s.u, dtype=float),
                        [s.slacks[_row_label(p.ineq[j], j)] * L.scale[i]
                         for i, j in enumerate(L.slack_rows)]])
    lam = np.array([s.multipliers.get(lbl, 0.0) for lbl in L.labels])
    Gz = L.G @ z
    CtL = L.C.T @ lam if lam.size else np.zeros_like(z)
    stat_scale = max(1.0, np.max(np.abs(Gz)), np.max(np.abs(L.c), initial=0.0),
                     np.max(np.abs(CtL), initial=0.0))
    stationarity = np.max(np.abs(Gz + L.c - CtL)) / stat_scale
    slack = L.C @ z - L.d
    primal = max(0.0, float(-slack.min())) if slack.size else 0.0
    dual = max(0.0, float(-lam.min())) if lam.size else 0.0
    comp = float(np.max(np.abs(lam * slack) / np.maximum(1.0, np.abs(lam)))) if lam.size else 0.0
    return float(max(stationarity, primal, dual, comp))


def weighted_tracking_problem(weight, target, rows: Sequence[ConstraintRow] = (),
                              lb=None, ub=None) -> QpProblem:
    """QP for argmin ||u - target||_W^2, i.e. P = 2W and q = -2W target."""
    W = np.asarray(weight, dtype=float)
    target = np.asarray(target, dtype=float)
    return QpProblem(P=2.0 * W, q=-2.0 * W @ target, ineq=tuple(rows), lb=lb, ub=ub)
