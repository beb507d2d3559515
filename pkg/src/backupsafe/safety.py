"""Safety-filter constraint assembly and controllers.

Three controllers share one QP form, argmin ||u - k_d||_Gamma^2 over the input
box, and differ in their affine rows a^T u >= b:

* ``cbf_qp_controller``: one row from h at the current state.
* ``backup_controller``: one row per grid node of the backup flow for h, plus
  a terminal row for h_b, chained through the flow sensitivity Q.
* ``issf_backup_controller``: the same rows tightened by sigma |dh/dx|^2 and
  relaxed by penalized slacks.

Class-K gains are linear: alpha(r) = gamma r and alpha_b(r) = gamma_b r.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import qp
from .flow import BackupFlow, VectorField, integrate_backup_flow
from .qp import ConstraintRow, QpSolution

Barrier = Callable[[np.ndarray, float], tuple]


@dataclass(frozen=True)
class ControlAffine:
    """x' = f(x) + g(x) u."""

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SafetySpec:
    """Safe set {h >= 0}; ``evaluate(x, t)`` returns (h, grad_h, dh_dt)."""

    evaluate: Barrier

    def h(self, x, t=0.0) -> float:
        return self.evaluate(x, t)[0]

    def grad_h(self, x, t=0.0) -> np.ndarray:
        return self.evaluate(x, t)[1]

    def dh_dt(self, x, t=0.0) -> float:
        return self.evaluate(x, t)[2]


@dataclass(frozen=True)
class BackupSpec:
    """Backup set {h_b >= 0} with its input-admissible backup controller."""

    evaluate: Barrier
    k_b: Callable[[np.ndarray, float], np.ndarray]
    field_jacobian: Callable[[np.ndarray, float], np.ndarray]
    dim: int = 3
    field: Optional[VectorField] = None

    def h_b(self, x, t=0.0) -> float:
        return self.evaluate(x, t)[0]

    def vector_field(self, model: ControlAffine) -> VectorField:
        """Closed backup loop f_b(x, t) = f(x) + g(x) k_b(x, t)."""
        if self.field is not None:
            return self.field

        def f_b(x, t):
            return model.f(x) + model.g(x) @ self.k_b(x, t)
        return VectorField(dim=self.dim, eval=f_b, jacobian=self.field_jacobian)


@dataclass(frozen=True)
class SafetyGains:
    gamma: float = 1.0
    gamma_b: float = 1.0
    sigma: float = 0.1
    sigma_b: float = 0.1
    T: float = 4.0
    N_c: int = 80
    delta_heading: float = 0.0
    epsilon: float = 0.01
    substeps: int = 5

    def __post_init__(self):
        if not (self.gamma > 0 and self.gamma_b > 0):
            raise ValueError("gamma and gamma_b must be positive")
        if not self.T > 0:
            raise ValueError("backup horizon T must be positive")
        if self.N_c < 1:
            raise ValueError("N_c must be >= 1")
        if self.sigma < 0 or self.sigma_b < 0:
            raise ValueError("sigma and sigma_b must be nonnegative")


@dataclass(frozen=True)
class InputBox:
    lower: np.ndarray
    upper: np.ndarray


def _solve(weight, k_d, rows, box: Optional[InputBox]) -> QpSolution:
    m = len(k_d)
    W = np.eye(m) if weight is None else weight
    lb = None if box is None else box.lower
    ub = None if box is None else box.upper
    return qp.solve(qp.weighted_tracking_problem(W, k_d, rows, lb, ub))


def cbf_row(x, t, model: ControlAffine, spec: SafetySpec, gamma: float) -> ConstraintRow:
    h, grad, dh_dt = spec.evaluate(x, t)
    return ConstraintRow(a=grad @ model.g(x), b=-gamma * h - grad @ model.f(x) - dh_dt, label="h")


def cbf_qp_controller(x, t, k_d, model: ControlAffine, spec: SafetySpec, gains: SafetyGains,
                      box: Optional[InputBox] = None, weight=None) -> QpSolution:
    """Minimally modify ``k_d`` subject to h' >= -gamma h.

    With a finite ``box`` the row may conflict with the bounds; the solver then
    reports ``infeasible`` and the caller decides what to do.
    """
    row = cbf_row(x, t, model, spec, gains.gamma)
    return _solve(weight, k_d, [row], box)


def assemble_backup_rows(x, t, flow: BackupFlow, model: ControlAffine, spec: SafetySpec,
                         bspec: BackupSpec, gains: SafetyGains, robust: bool = False,
                         penalties: Optional[tuple] = None) -> list[ConstraintRow]:
    """Rows for h along the backup flow and h_b at its end.

    Row i reads  [grad h(phi_i) Q_i] (f(x) + g(x) u) + dh/dt|_{t+theta_i}
                 >= -gamma h(phi_i) (+ sigma |grad h(phi_i) Q_i|^2 if robust).
    ``penalties=(p, p_b)`` attaches slack penalties to the h and h_b rows.
    """
    if flow.sens is None:
        raise ValueError("backup rows need a flow integrated with sensitivity")
    f, g = model.f(x), model.g(x)
    p_i, p_b = (None, None) if penalties is None else penalties
    rows = []
    for i, theta in enumerate(flow.thetas):
        h, grad, dh_dt = spec.evaluate(flow.states[i], t + theta)
        dh_dx = grad @ flow.sens[i]
        b = -gains.gamma * h - dh_dx @ f - dh_dt
        if robust:
            b += gains.sigma * float(dh_dx @ dh_dx)
        rows.append(ConstraintRow(a=dh_dx @ g, b=b, slack_penalty=p_i, label=f"hbar_{i}"))
    hb, grad_b, dhb_dt = bspec.evaluate(flow.states[-1], t + flow.thetas[-1])
    dhb_dx = grad_b @ flow.sens[-1]
    b = -gains.gamma_b * hb - dhb_dx @ f - dhb_dt
    if robust:
        b += gains.sigma_b * float(dhb_dx @ dhb_dx)
    rows.append(ConstraintRow(a=dhb_dx @ g, b=b, slack_penalty=p_b, label="hb"))
    return rows


def flow_barriers(flow: BackupFlow, spec: SafetySpec, bspec: BackupSpec):
    """(h along the grid, h_b at the terminal node)."""
    t = flow.base_time
    hbar = np.array([spec.h(flow.states[i], t + th) for i, th in enumerate(flow.thetas)])
    hbar_b = bspec.h_b(flow.states[-1], t + flow.thetas[-1])
    return hbar, float(hbar_b)


def membership_SI(x, t, flow: BackupFlow, spec: SafetySpec, bspec: BackupSpec):
    """Is x in the implicit invariant set? Returns (inside, margin)."""
    hbar, hbar_b = flow_barriers(flow, spec, bspec)
    margin = min(float(hbar.min()), hbar_b)
    return margin >= 0.0, margin


def sd_thresholds(gains: SafetyGains, B: float) -> tuple[float, float]:
    """Lower thresholds -B/(4 sigma gamma) and -B/(4 sigma_b gamma_b)."""
    if B == 0:
        return 0.0, 0.0
    if not (gains.sigma > 0 and gains.sigma_b > 0):
        raise ValueError("the S_d neighborhood needs sigma, sigma_b > 0")
    return (-B / (4.0 * gains.sigma * gains.gamma),
            -B / (4.0 * gains.sigma_b * gains.gamma_b))


def membership_Sd(x, t, flow: BackupFlow, spec: SafetySpec, bspec: BackupSpec,
                  gains: SafetyGains, B: float):
    """Membership in the disturbance neighborhood of S_I; (inside, margin)."""
    th, th_b = sd_thresholds(gains, B)
    hbar, hbar_b = flow_barriers(flow, spec, bspec)
    margin = min(float(hbar.min()) - th, hbar_b - th_b)
    return margin >= 0.0, margin


def _flow(x, t, model, bspec, gains) -> BackupFlow:
    field = bspec.vector_field(model)
    return integrate_backup_flow(field, x, t, gains.T, gains.N_c, gains.substeps)


def _with_flow_diagnostics(sol, flow, spec, bspec):
    hbar, hbar_b = flow_barriers(flow, spec, bspec)
    margin = min(float(hbar.min()), hbar_b)
    return replace(sol, diagnostics={
        "hbar_min": float(hbar.min()), "hbar_b": hbar_b,
        "in_SI": margin >= 0.0, "SI_margin": margin, "flow": flow,
    })


def backup_controller(x, t, k_d, model: ControlAffine, spec: SafetySpec, bspec: BackupSpec,
                      gains: SafetyGains, box: InputBox, weight=None,
                      flow: Optional[BackupFlow] = None) -> QpSolution:
    """Discretized backup-set QP without slacks.

    Infeasibility is returned as-is; ``diagnostics['in_SI']`` tells whether it
    breaks the existence guarantee (x in S_I) or merely reflects x outside S_I.
    """
    if box is None:
        raise ValueError("the backup controller needs a finite input box")
    flow = flow or _flow(x, t, model, bspec, gains)
    rows = assemble_backup_rows(x, t, flow, model, spec, bspec, gains, robust=False)
    return _with_flow_diagnostics(_solve(weight, k_d, rows, box), flow, spec, bspec)


def issf_backup_controller(x, t, k_d, model: ControlAffine, spec: SafetySpec,
                           bspec: BackupSpec, gains: SafetyGains, box: InputBox,
                           penalties=(1e18, 1e18), weight=None,
                           flow: Optional[BackupFlow] = None) -> QpSolution:
    """Input-to-state safe backup QP: tightened rows, each relaxed by a slack."""
    if not (penalties[0] > 0 and penalties[1] > 0):
        raise ValueError("penalties must be positive")
    flow = flow or _flow(x, t, model, bspec, gains)
    rows = assemble_backup_rows(x, t, flow, model, spec, bspec, gains, robust=True,
                                penalties=tuple(penalties))
    return _with_flow_diagnostics(_solve(weight, k_d, rows, box), flow, spec, bspec)
