"""Closed-loop scenario runs, discrepancy fitting and invariant checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import unicycle as uni
from .flow import IntegrationDiverged, integrate_backup_flow
from .qp import OPTIMAL
from .safety import (InputBox, SafetyGains, backup_controller, cbf_qp_controller,
                     flow_barriers, issf_backup_controller)
from .unicycle import DesiredParams, FosState, InputBounds, ObstacleTrack

log = logging.getLogger(__name__)

CONTROLLERS = ("cbf-unbounded", "cbf-bounded", "backup", "issf-backup", "pure-backup")
PLANTS = ("rom", "fos-proxy", "rom-with-injected-d")
DISTURBANCES = ("adversarial", "random")

NO_QP = "none"
HELD = "held"

ROM_TOL = 1e-9
DISTURBED_TOL = 1e-3
BOX_TOL = 1e-6


@dataclass(frozen=True)
class ScenarioConfig:
    controller: str = "backup"
    plant: str = "rom"
    obstacle: ObstacleTrack = ObstacleTrack()
    gains: SafetyGains = SafetyGains()
    desired: DesiredParams = DesiredParams()
    bounds: InputBounds = InputBounds()
    R_O: float = 0.75
    weight: tuple = (1.0, 0.25)
    penalties: tuple = (1e18, 1e18)
    duration: float = 40.0
    control_dt: float = 0.05
    plant_substeps: int = 10
    tau: float = 0.5
    noise: float = 0.0
    B_inj: float = 0.0
    disturbance: str = "adversarial"
    x0: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.plant not in PLANTS:
            raise ValueError(f"unknown plant {self.plant!r}")
        if self.disturbance not in DISTURBANCES:
            raise ValueError(f"unknown disturbance mode {self.disturbance!r}")
        if not (self.duration > 0 and self.control_dt > 0):
            raise ValueError("duration and control_dt must be positive")
        steps = self.duration / self.control_dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("control_dt must divide duration")
        if self.plant_substeps < 1:
            raise ValueError("plant_substeps must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.control_dt))

    @property
    def box(self) -> Optional[InputBox]:
        if self.controller == "cbf-unbounded":
            return None
        return InputBox(self.bounds.lower, self.bounds.upper)

    @property
    def disturbed(self) -> bool:
        return self.plant != "rom"


LOG_COLUMNS = ("t", "xi", "eta", "psi", "v_cmd", "omega_cmd", "v_act", "omega_act",
               "h", "hbar_min", "hbar_b", "d_norm2", "qp_status", "max_slack")


@dataclass
class TrajectoryLog:
    """One record per control step; numeric columns as float arrays."""

    columns: dict
    config: Optional[ScenarioConfig] = None
    d: Optional[np.ndarray] = None
    active_rows: Optional[np.ndarray] = None
    aborted: Optional[str] = None

    def __getitem__(self, name):
        return self.columns[name]

    def __len__(self):
        return len(self.columns["t"])

    @property
    def t(self) -> np.ndarray:
        return self.columns["t"]


class _Recorder:
    def __init__(self):
        self.rows = {c: [] for c in LOG_COLUMNS}
        self.d = []
        self.active = []

    def add(self, **kw):
        for c in LOG_COLUMNS:
            self.rows[c].append(kw[c])
        self.d.append(kw["d"])
        self.active.append(kw["active"])

    def finish(self, cfg, aborted=None) -> TrajectoryLog:
        cols = {c: (list(v) if c == "qp_status" else np.array(v, dtype=float))
                for c, v in self.rows.items()}
        return TrajectoryLog(columns=cols, config=cfg, d=np.array(self.d).reshape(-1, 3),
                             active_rows=np.array(self.active, dtype=int), aborted=aborted)


def _rk4_rom(x, u, d, dt, substeps):
    h = dt / substeps
    for _ in range(substeps):
        k1 = uni.rom_dynamics(x, u) + d
        k2 = uni.rom_dynamics(x + 0.5 * h * k1, u) + d
        k3 = uni.rom_dynamics(x + 0.5 * h * k2, u) + d
        k4 = uni.rom_dynamics(x + h * k3, u) + d
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged(float("nan"))
    return x


def run_scenario(cfg: ScenarioConfig) -> TrajectoryLog:
    """Run one closed loop with zero-order-hold control at ``cfg.control_dt``.

    A QP that does not return ``optimal`` is logged with its status and the
    previous input is held (the backup input k_b(x0) before the first success).
    Integration faults stop the run and return the partial log.
    """
    model = uni.unicycle_model()
    spec = uni.safety_spec(cfg.obstacle, cfg.gains.delta_heading, cfg.R_O)
    bspec = uni.backup_spec(cfg.obstacle, cfg.bounds, cfg.gains.epsilon)
    field_b = bspec.vector_field(model)
    weight = np.diag(cfg.weight)
    box = cfg.box
    rng = np.random.default_rng(cfg.seed)
    g = cfg.gains

    x = np.array(cfg.x0, dtype=float)
    fos = FosState(pose=x.copy(), v_act=0.0, omega_act=0.0) if cfg.plant == "fos-proxy" else None
    prev_u = bspec.k_b(x, 0.0)
    rec = _Recorder()
    dt = cfg.control_dt

    for k in range(cfg.n_steps + 1):
        t = k * dt
        try:
            h = spec.h(x, t)
            k_d = uni.desired_controller(x, cfg.desired)
            status, slack, active = NO_QP, 0.0, 0
            hbar_min = hbar_b = math.nan
            if cfg.controller in ("cbf-unbounded", "cbf-bounded"):
                sol = cbf_qp_controller(x, t, k_d, model, spec, g, box, weight)
            elif cfg.controller == "backup":
                sol = backup_controller(x, t, k_d, model, spec, bspec, g, box, weight)
            elif cfg.controller == "issf-backup":
                sol = issf_backup_controller(x, t, k_d, model, spec, bspec, g, box,
                                             cfg.penalties, weight)
            else:
                sol = None
                u = bspec.k_b(x, t)
                flow = integrate_backup_flow(field_b, x, t, g.T, g.N_c, g.substeps,
                                             sensitivity=False)
                hbar, hbar_b = flow_barriers(flow, spec, bspec)
                hbar_min = float(hbar.min())
            if sol is not None:
                status = sol.status
                active = len(sol.active_set)
                slack = sol.max_slack
                if "hbar_min" in sol.diagnostics:
                    hbar_min = sol.diagnostics["hbar_min"]
                    hbar_b = sol.diagnostics["hbar_b"]
                if sol.ok:
                    u = sol.u
                else:
                    u = prev_u
                    log.debug("t=%.3f: QP %s, holding previous input", t, status)

            d = np.zeros(3)
            noise = None
            if cfg.plant == "rom-with-injected-d":
                d = _injected_disturbance(cfg, spec.grad_h(x, t), rng)
                act = (u[0], u[1])
            elif cfg.plant == "fos-proxy":
                if cfg.noise > 0:
                    noise = rng.uniform(-cfg.noise, cfg.noise, size=2)
                d = uni.discrepancy(fos, u, noise)
                nz = (0.0, 0.0) if noise is None else noise
                act = (fos.v_act + nz[0], fos.omega_act + nz[1])
            else:
                act = (u[0], u[1])

            rec.add(t=t, xi=x[0], eta=x[1], psi=x[2], v_cmd=u[0], omega_cmd=u[1],
                    v_act=act[0], omega_act=act[1], h=h, hbar_min=hbar_min, hbar_b=hbar_b,
                    d_norm2=float(d @ d), qp_status=status, max_slack=slack, d=d,
                    active=active)
            if k == cfg.n_steps:
                break
            prev_u = np.array(u, dtype=float)

            if cfg.plant == "fos-proxy":
                sub = dt / cfg.plant_substeps
                for _ in range(cfg.plant_substeps):
                    fos = uni.fos_step(fos, u, sub, cfg.tau, noise)
                if not np.all(np.isfinite(fos.pose)):
                    raise IntegrationDiverged(t + dt)
                x = np.array(fos.pose)
            else:
                x = _rk4_rom(x, u, d, dt, cfg.plant_substeps)
        except (IntegrationDiverged, uni.DegenerateGeometry) as exc:
            log.warning("scenario aborted at t=%.3f: %s", t, exc)
            return rec.finish(cfg, aborted=f"t={t:.6g}: {exc}")
    return rec.finish(cfg)


def _injected_disturbance(cfg, grad_h, rng) -> np.ndarray:
    mag = math.sqrt(cfg.B_inj)
    if mag == 0:
        return np.zeros(3)
    if cfg.disturbance == "adversarial":
        norm = float(np.linalg.norm(grad_h))
        return -mag * grad_h / norm if norm > 0 else np.zeros(3)
    v = rng.standard_normal(3)
    return mag * v / np.linalg.norm(v)


# -- discrepancy envelope ------------------------------------------------------

@dataclass(frozen=True)
class DiscrepancyFit:
    """Envelope |d|^2 <= A exp(-lambda t) + B dominating the logged samples."""

    A: float
    lam: float
    B: float
    residual: float

    def envelope(self, t):
        return self.A * np.exp(-self.lam * np.asarray(t)) + self.B


def fit_discrepancy(log_or_t, d_norm2=None) -> DiscrepancyFit:
    """Fit (A, lambda, B) to a |d|^2 series.

    B is the maximum over the trailing half of the samples. lambda comes from a
    least-squares line through log(|d|^2 - B), weighted by |d|^2 - B, over the
    leading run of samples that exceed B, and A is the smallest value that makes the envelope dominate
    every sample.
    """
    if d_norm2 is None:
        t, y = np.asarray(log_or_t.t, float), np.asarray(log_or_t["d_norm2"], float)
    else:
        t, y = np.asarray(log_or_t, float), np.asarray(d_norm2, float)
    if y.size == 0 or np.all(y == 0):
        return DiscrepancyFit(0.0, 1.0, 0.0, 0.0)
    t = t - t[0]
    B = float(np.max(y[len(y) // 2:]))
    excess = y - B
    nonpos = np.flatnonzero(excess <= 0)
    lead = int(nonpos[0]) if nonpos.size else len(y)
    lam = math.nan
    if lead >= 2:
        # weight by the excess so samples barely above B do not dominate in log space
        w = excess[:lead] / excess[:lead].max()
        slope, _ = np.polyfit(t[:lead], np.log(excess[:lead]), 1, w=w)
        lam = -float(slope)
    if not (lam > 0):
        lam = 1.0
    above = excess > 0
    A = float(np.max(excess[above] * np.exp(lam * t[above]))) if np.any(above) else 0.0
    fit = DiscrepancyFit(A=A, lam=lam, B=B, residual=0.0)
    residual = float(np.max(y - fit.envelope(t)))
    return DiscrepancyFit(A=A, lam=lam, B=B, residual=max(residual, 0.0))


def step_response_log(tau: float = 0.5, u=(0.2, 0.0), duration: float = 10.0,
                      control_dt: float = 0.05, noise: float = 0.0, seed: int = 0,
                      substeps: int = 10) -> TrajectoryLog:
    """Open-loop FOS proxy driven by a constant command from rest."""
    rng = np.random.default_rng(seed)
    u = np.asarray(u, dtype=float)
    s = FosState(pose=np.zeros(3), v_act=0.0, omega_act=0.0)
    rec = _Recorder()
    n = int(round(duration / control_dt))
    for k in range(n + 1):
        t = k * control_dt
        nz = rng.uniform(-noise, noise, size=2) if noise > 0 else None
        d = uni.discrepancy(s, u, nz)
        z = (0.0, 0.0) if nz is None else nz
        rec.add(t=t, xi=s.pose[0], eta=s.pose[1], psi=s.pose[2], v_cmd=u[0], omega_cmd=u[1],
                v_act=s.v_act + z[0], omega_act=s.omega_act + z[1], h=math.nan,
                hbar_min=math.nan, hbar_b=math.nan, d_norm2=float(d @ d), qp_status=NO_QP,
                max_slack=0.0, d=d, active=0)
        for _ in range(substeps):
            s = uni.fos_step(s, u, control_dt / substeps, tau, nz)
    return rec.finish(None)


# -- gradient bounds -------------------------------------------------------------

@dataclass(frozen=True)
class GradientBounds:
    D: float
    D_b: float
    count: int


def estimate_gradient_bounds(states, t, model, spec, bspec, gains: SafetyGains) -> GradientBounds:
    """Empirical suprema of |grad h Q| and |grad h_b Q| over states and grid."""
    field_b = bspec.vector_field(model)
    D = D_b = 0.0
    n = 0
    for x in states:
        flow = integrate_backup_flow(field_b, x, t, gains.T, gains.N_c, gains.substeps)
        for i, th in enumerate(flow.thetas):
            Q = flow.sens[i]
            D = max(D, float(np.linalg.norm(spec.grad_h(flow.states[i], t + th) @ Q)))
            hb_grad = bspec.evaluate(flow.states[i], t + th)[1]
            D_b = max(D_b, float(np.linalg.norm(hb_grad @ Q)))
        n += 1
    return GradientBounds(D=D, D_b=D_b, count=n)


# -- invariant report -------------------------------------------------------------

PASS, FAIL, INFO, NA = "pass", "fail", "info", "not-applicable"


@dataclass
class InvariantReport:
    min_h: float
    min_hbar_min: float
    min_hbar_b: float
    max_box_violation: float
    max_slack: float
    h_threshold: float
    fit: DiscrepancyFit
    cd_margin: float
    cd_margins: np.ndarray
    input_bounds_violated: bool
    criteria: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v != FAIL for v in self.criteria.values())

    @property
    def failures(self) -> list:
        return [k for k, v in self.criteria.items() if v == FAIL]

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return str(v).lower()
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = ["summary:",
                 f"  passed: {fmt(self.passed)}",
                 f"  failures: {','.join(self.failures) or 'none'}",
                 "values:"]
        for key in ("min_h", "min_hbar_min", "min_hbar_b", "max_box_violation", "max_slack",
                    "h_threshold", "cd_margin", "input_bounds_violated"):
            lines.append(f"  {key}: {fmt(getattr(self, key))}")
        lines.append("discrepancy_fit:")
        for key in ("A", "lam", "B", "residual"):
            lines.append(f"  {key}: {fmt(float(getattr(self.fit, key)))}")
        lines.append("criteria:")
        for k, v in self.criteria.items():
            lines.append(f"  {k}: {v}")
        if self.notes:
            lines.append("notes:")
            lines.extend(f"  - {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def _nanmin(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.nanmin(a)) if a.size and not np.all(np.isnan(a)) else math.nan


def check_invariants(log: TrajectoryLog, cfg: ScenarioConfig,
                     gradient_bounds: Optional[GradientBounds] = None) -> InvariantReport:
    """Evaluate the safety invariants of a finished run.

    The C_d(t) margin uses the robust tightening
        H = hbar - A e^{-lam t} / (4 sigma (lam - gamma)) + B / (4 sigma gamma)
    when sigma, sigma_b > 0, and the exponential-tracking form
        H = hbar - D A' e^{-lam' t} / (lam' - gamma),  A' = sqrt(A), lam' = lam / 2
    when sigma = 0, the envelope has no floor and gradient bounds are supplied.
    With A = 0 the decaying term vanishes and lam is not constrained.
    """
    g = cfg.gains
    t = np.asarray(log.t, dtype=float)
    h = np.asarray(log["h"], dtype=float)
    hbar = np.asarray(log["hbar_min"], dtype=float)
    hbar_b = np.asarray(log["hbar_b"], dtype=float)
    v, w = np.asarray(log["v_cmd"]), np.asarray(log["omega_cmd"])
    lo, hi = cfg.bounds.lower, cfg.bounds.upper
    box_viol = float(max(np.max(lo[0] - v, initial=0), np.max(v - hi[0], initial=0),
                         np.max(lo[1] - w, initial=0), np.max(w - hi[1], initial=0), 0.0))
    slack = np.asarray(log["max_slack"], dtype=float)
    fit = fit_discrepancy(t, log["d_norm2"])
    notes = []
    criteria = {}

    tol = DISTURBED_TOL if cfg.disturbed else ROM_TOL
    B_bound = cfg.B_inj if cfg.plant == "rom-with-injected-d" else fit.B
    robust = g.sigma > 0 and g.sigma_b > 0 and cfg.controller == "issf-backup"
    h_threshold = 0.0
    if cfg.disturbed and robust:
        h_threshold = -B_bound / (4.0 * g.sigma * g.gamma)

    min_h = _nanmin(h)
    criteria["min_h"] = PASS if min_h >= h_threshold - tol else FAIL

    flagged = box_viol > BOX_TOL
    if cfg.controller == "cbf-unbounded":
        criteria["input_bounds"] = INFO
        notes.append("unbounded controller: input-bound excursions are expected")
    else:
        criteria["input_bounds"] = FAIL if flagged else PASS

    statuses = list(log["qp_status"])
    if cfg.controller == "pure-backup":
        criteria["qp_status"] = NA
    else:
        criteria["qp_status"] = PASS if all(s == OPTIMAL for s in statuses) else FAIL

    criteria["max_slack"] = INFO if cfg.controller == "issf-backup" else NA

    # C_d(t) margins
    cd = np.full(len(t), math.nan)
    if cfg.controller in ("cbf-unbounded", "cbf-bounded") or np.all(np.isnan(hbar)):
        criteria["cd_margin"] = NA
        notes.append("no backup flow logged: C_d margin not applicable")
    else:
        status, cd, note = _cd_margins(t, hbar, hbar_b, fit, g, cfg, robust, B_bound,
                                       gradient_bounds)
        if note:
            notes.append(note)
        if status == NA:
            criteria["cd_margin"] = NA
        else:
            criteria["cd_margin"] = PASS if _monotone_certificate(cd, tol) else FAIL

    if log.aborted:
        criteria["completed"] = FAIL
        notes.append(f"aborted: {log.aborted}")
    elif len(t) < cfg.n_steps + 1:
        criteria["completed"] = FAIL
        notes.append(f"log has {len(t)} of {cfg.n_steps + 1} records")

    return InvariantReport(
        min_h=min_h, min_hbar_min=_nanmin(hbar), min_hbar_b=_nanmin(hbar_b),
        max_box_violation=box_viol, max_slack=float(np.max(slack, initial=0.0)),
        h_threshold=h_threshold, fit=fit, cd_margin=_nanmin(cd), cd_margins=cd,
        input_bounds_violated=flagged, criteria=criteria, notes=notes)


def _cd_margins(t, hbar, hbar_b, fit, g, cfg, robust, B_bound, bounds):
    A, lam = fit.A, fit.lam
    decay = np.exp(-lam * t)
    if robust:
        if A > 0 and not (g.gamma < lam and g.gamma_b < lam):
            return NA, np.full(len(t), math.nan), \
                f"gamma, gamma_b < lambda fails (lambda={lam:.4g}): margin precondition"
        dec = A * decay / (4 * g.sigma * (lam - g.gamma)) if A > 0 else 0.0
        dec_b = A * decay / (4 * g.sigma_b * (lam - g.gamma_b)) if A > 0 else 0.0
        H = hbar - dec + B_bound / (4 * g.sigma * g.gamma)
        H_b = hbar_b - dec_b + B_bound / (4 * g.sigma_b * g.gamma_b)
        return PASS, np.minimum(H, H_b), None
    if A == 0 and B_bound == 0:
        return PASS, np.minimum(hbar, hbar_b), None
    if B_bound > 1e-9 or bounds is None:
        return NA, np.full(len(t), math.nan), \
            "disturbance floor without robust terms (or no gradient bounds): not applicable"
    A1, lam1 = math.sqrt(A), lam / 2.0
    if not (g.gamma < lam1 and g.gamma_b < lam1):
        return NA, np.full(len(t), math.nan), \
            f"gamma, gamma_b < lambda fails (lambda={lam1:.4g}): margin precondition"
    H = hbar - bounds.D * A1 * np.exp(-lam1 * t) / (lam1 - g.gamma)
    H_b = hbar_b - bounds.D_b * A1 * np.exp(-lam1 * t) / (lam1 - g.gamma_b)
    return PASS, np.minimum(H, H_b), None


def _monotone_certificate(margins, tol) -> bool:
    """Once the margin is nonnegative it must stay above -tol."""
    inside = np.flatnonzero(margins >= 0)
    if inside.size == 0:
        return False
    return bool(np.all(margins[inside[0]:] >= -tol))
