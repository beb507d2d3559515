import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backupsafe import qp
from backupsafe.qp import (INFEASIBLE, OPTIMAL, ConstraintRow, QpError, QpProblem, kkt_residual,
                           solve, weighted_tracking_problem)

GAMMA = np.diag([1.0, 0.25])
LB = np.array([0.1, -0.3])
UB = np.array([0.2, 0.3])


def tracking(target, rows=(), lb=LB, ub=UB):
    return weighted_tracking_problem(GAMMA, target, rows, lb, ub)


def grid_oracle(p: QpProblem, n=400, lo=None, hi=None):
    """Minimum of the (slack-free) objective over a box grid; returns (value, cell size)."""
    lo = p.lb if lo is None else lo
    hi = p.ub if hi is None else hi
    g0 = np.linspace(lo[0], hi[0], n)
    g1 = np.linspace(lo[1], hi[1], n)
    U0, U1 = np.meshgrid(g0, g1, indexing="ij")
    U = np.stack([U0.ravel(), U1.ravel()], axis=1)
    obj = 0.5 * np.einsum("ij,jk,ik->i", U, p.P, U) + U @ p.q
    ok = np.ones(len(U), dtype=bool)
    for r in p.ineq:
        ok &= U @ r.a >= r.b
    return (float(obj[ok].min()) if ok.any() else np.inf), max(g0[1] - g0[0], g1[1] - g1[0])


# -- worked examples -----------------------------------------------------------------------

def test_unconstrained_optimum_inside_box():
    p = tracking([0.2, 0.1])
    s = solve(p)
    assert s.status == OPTIMAL
    assert np.allclose(s.u, [0.2, 0.1], atol=1e-12)
    assert s.active_set == ()
    assert kkt_residual(p, s) <= 1e-8


def test_target_outside_box_projects_separably():
    p = tracking([0.3, 0.5])
    s = solve(p)
    assert np.allclose(s.u, [0.2, 0.3], atol=1e-12)
    assert set(s.active_set) == {"ub[0]", "ub[1]"}
    best, _ = grid_oracle(p, n=200)
    assert s.objective <= best + 1e-12
    assert kkt_residual(p, s) <= 1e-8


def test_heavily_penalized_slack_row_acts_as_hard_row():
    row = ConstraintRow(a=np.array([1.0, 0.0]), b=0.15, slack_penalty=1e18, label="r")
    p = weighted_tracking_problem(np.eye(2), [0.1, 0.0], [row])
    s = solve(p)
    assert s.status == OPTIMAL
    assert np.allclose(s.u, [0.15, 0.0], atol=1e-9)
    assert s.slacks["r"] <= 1e-12
    assert kkt_residual(p, s) <= 1e-8


def test_slack_row_matches_hand_kkt():
    # min (u - 0.1)^2 + p d^2 s.t. u >= 0.15 - d: u = (0.1 + 0.15 p) / (1 + p)
    pen = 4.0
    row = ConstraintRow(a=np.array([1.0, 0.0]), b=0.15, slack_penalty=pen, label="r")
    p = weighted_tracking_problem(np.eye(2), [0.1, 0.0], [row])
    s = solve(p)
    u = (0.1 + 0.15 * pen) / (1 + pen)
    assert s.u[0] == pytest.approx(u, abs=1e-12)
    assert s.slacks["r"] == pytest.approx(0.15 - u, abs=1e-12)
    assert kkt_residual(p, s) <= 1e-8


def test_infeasible_row_names_conflicting_bound():
    row = ConstraintRow(a=np.array([1.0, 0.0]), b=0.25, label="r")
    s = solve(tracking([0.15, 0.0], [row]))
    assert s.status == INFEASIBLE
    assert set(s.infeasible_subset) == {"r", "ub[0]"}
    assert not s.ok


def test_vacuous_zero_row():
    zero = ConstraintRow(a=np.zeros(2), b=-0.1, label="z")
    s = solve(tracking([0.15, 0.05], [zero]))
    assert s.ok and np.allclose(s.u, [0.15, 0.05], atol=1e-12)
    bad = ConstraintRow(a=np.zeros(2), b=0.1, label="z")
    s = solve(tracking([0.15, 0.05], [bad]))
    assert s.status == INFEASIBLE and "z" in s.infeasible_subset


def test_multipliers_reported_for_active_rows():
    row = ConstraintRow(a=np.array([1.0, 1.0]), b=0.2, label="sum")
    p = weighted_tracking_problem(np.eye(2), [0.0, 0.0], [row])
    s = solve(p)
    assert np.allclose(s.u, [0.1, 0.1], atol=1e-12)
    assert s.active_set == ("sum",)
    # gradient 2u = lambda a  ->  lambda = 0.2
    assert s.multipliers["sum"] == pytest.approx(0.2, abs=1e-12)


# -- kkt_residual -------------------------------------------------------------------------------

def test_kkt_residual_grows_with_primal_perturbation():
    p = tracking([0.3, 0.5])
    s = solve(p)
    from dataclasses import replace
    moved = replace(s, u=s.u + np.array([1e-3, -1e-3]))
    assert kkt_residual(p, moved) >= 1e-4


def test_kkt_residual_zero_at_origin():
    p = QpProblem(P=np.eye(2), q=np.zeros(2))
    s = solve(p)
    assert np.array_equal(s.u, np.zeros(2))
    assert kkt_residual(p, s) == 0.0


# -- problem validation -----------------------------------------------------------------------

@pytest.mark.parametrize("P", [np.array([[1.0, 0.1], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, -1.0]]),
                               np.zeros((2, 2))])
def test_rejects_bad_hessian(P):
    with pytest.raises(QpError):
        QpProblem(P=P, q=np.zeros(2))


def test_rejects_crossed_bounds():
    with pytest.raises(QpError):
        QpProblem(P=np.eye(2), q=np.zeros(2), lb=np.array([1.0, 0.0]), ub=np.array([0.0, 1.0]))


def test_rejects_malformed_rows():
    with pytest.raises(QpError):
        ConstraintRow(a=np.array([np.nan, 0.0]), b=0.0)
    with pytest.raises(QpError):
        ConstraintRow(a=np.array([1.0, 0.0]), b=0.0, slack_penalty=0.0)
    with pytest.raises(QpError):
        QpProblem(P=np.eye(2), q=np.zeros(2), ineq=(ConstraintRow(a=np.ones(3), b=0.0),))


# -- randomized oracle equivalence ---------------------------------------------------------------

def random_feasible_problem(rng):
    """2-variable problem with <= 6 rows, feasible by construction around u_star."""
    L = rng.uniform(-1, 1, (2, 2))
    P = L @ L.T + 0.1 * np.eye(2)
    q = rng.uniform(-1, 1, 2)
    lb = -rng.uniform(0.5, 1.0, 2)
    ub = rng.uniform(0.5, 1.0, 2)
    u_star = rng.uniform(lb * 0.8, ub * 0.8)
    rows = []
    for j in range(int(rng.integers(0, 7))):
        a = rng.uniform(-1, 1, 2)
        rows.append(ConstraintRow(a=a, b=float(a @ u_star) - rng.uniform(0, 0.3), label=f"c{j}"))
    return QpProblem(P=P, q=q, ineq=tuple(rows), lb=lb, ub=ub)


def test_random_problems_match_grid_oracle():
    rng = np.random.default_rng(20)
    for _ in range(60):
        p = random_feasible_problem(rng)
        s = solve(p)
        assert s.status == OPTIMAL
        assert kkt_residual(p, s) <= 1e-8
        best, cell = grid_oracle(p)
        lip = np.max(np.abs(p.P @ s.u + p.q)) * 2 + np.abs(p.P).max() * cell
        assert s.objective <= best + 1e-12
        assert best - s.objective <= 2 * cell * lip


def test_solver_is_deterministic():
    rng = np.random.default_rng(3)
    p = random_feasible_problem(rng)
    a, b = solve(p), solve(p)
    assert a.u.tobytes() == b.u.tobytes() and a.active_set == b.active_set


def test_relaxed_rows_never_infeasible():
    rng = np.random.default_rng(5)
    for _ in range(100):
        rows = [ConstraintRow(a=rng.uniform(-1, 1, 2), b=rng.uniform(-2, 5), slack_penalty=1e18,
                              label=f"c{j}") for j in range(int(rng.integers(1, 7)))]
        p = tracking(rng.uniform(-1, 1, 2), rows)
        s = solve(p)
        assert s.status == OPTIMAL
        assert all(v >= 0 for v in s.slacks.values())


def test_rows_violated_at_every_vertex_give_positive_slack():
    # v >= 0.5 cannot hold anywhere in the box
    row = ConstraintRow(a=np.array([1.0, 0.0]), b=0.5, slack_penalty=1e18, label="r")
    s = solve(tracking([0.2, 0.0], [row]))
    assert s.status == OPTIMAL
    assert s.slacks["r"] == pytest.approx(0.3, abs=1e-9)
    assert s.u[0] == pytest.approx(0.2, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(a0=st.floats(-1, 1), a1=st.floats(-1, 1), b=st.floats(0.0, 2.0), t0=st.floats(-1, 1),
       t1=st.floats(-1, 1))
def test_slack_nonincreasing_in_penalty(a0, a1, b, t0, t1):
    a = np.array([a0, a1])
    prev = np.inf
    for pen in 10.0 ** np.arange(2, 19, 2):
        row = ConstraintRow(a=a, b=b, slack_penalty=float(pen), label="r")
        s = solve(tracking([t0, t1], [row]))
        assert s.status == OPTIMAL
        assert s.slacks["r"] <= prev + 1e-12
        prev = s.slacks["r"]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_optimal_solutions_satisfy_kkt(seed):
    p = random_feasible_problem(np.random.default_rng(seed))
    s = solve(p)
    assert s.status == OPTIMAL
    assert kkt_residual(p, s) <= 1e-8
    for r in p.ineq:
        assert r.residual(s.u) >= -qp.ACTIVITY_TOL - 1e-12
