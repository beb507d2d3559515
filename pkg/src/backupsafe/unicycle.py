"""Unicycle obstacle-avoidance model suite.

State x = (xi, eta, psi), input u = (v, omega):

    xi'  = v cos(psi)
    eta' = v sin(psi)
    psi' = omega

Geometry shared by the safety functions, with p the planar position and p_O
the obstacle center:

    D = |p - p_O|,  n = (p - p_O) / D,  P = I - n n^T
    q = (cos psi, sin psi),  r = (-sin psi, cos psi)

Also provides the full-order-system proxy used for robustness experiments:
the unicycle driven through a first-order actuator lag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import VectorField

DEGENERATE_DISTANCE = 1e-9


class DegenerateGeometry(ValueError):
    """The state coincides with the obstacle center; n and P are undefined."""


@dataclass(frozen=True)
class InputBounds:
    v_min: float = 0.1
    v_max: float = 0.2
    omega_max: float = 0.3

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_min, -self.omega_max])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_max, self.omega_max])


@dataclass(frozen=True)
class ObstacleTrack:
    """Obstacle center, either fixed or oscillating sinusoidally in eta.

    For the sinusoidal kind eta_O(t) = eta_bar_O - A_eta sin(Omega t) / Omega.
    """

    kind: str = "static"
    xi_O: float = 2.0
    eta_bar_O: float = -0.25
    A_eta: float = 0.1
    Omega: float = 2 * math.pi / 5

    def __post_init__(self):
        if self.kind not in ("static", "sinusoidal"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if self.kind == "sinusoidal" and self.Omega == 0:
            raise ValueError("sinusoidal obstacle needs Omega != 0")

    def position(self, t: float) -> tuple[float, float]:
        if self.kind == "static":
            return self.xi_O, self.eta_bar_O
        return self.xi_O, self.eta_bar_O - self.A_eta * math.sin(self.Omega * t) / self.Omega

    def velocity(self, t: float) -> tuple[float, float]:
        if self.kind == "static":
            return 0.0, 0.0
        return 0.0, -self.A_eta * math.cos(self.Omega * t)

    def acceleration(self, t: float) -> tuple[float, float]:
        if self.kind == "static":
            return 0.0, 0.0
        return 0.0, self.A_eta * self.Omega * math.sin(self.Omega * t)


@dataclass(frozen=True)
class DesiredParams:
    v_g: float = 0.2
    eta_g: float = 0.0
    K_eta: float = 0.5
    K_psi: float = 0.5

    def __post_init__(self):
        if self.K_eta < 0 or self.K_psi < 0:
            raise ValueError("desired-controller gains must be nonnegative")


@dataclass(frozen=True)
class FosState:
    """Full-order proxy state: pose plus the lagged actuator rates."""

    pose: np.ndarray
    v_act: float
    omega_act: float


# -- reduced-order model ----------------------------------------------------

def rom_drift(x) -> np.ndarray:
    return np.zeros(3)


def rom_input_matrix(x) -> np.ndarray:
    c, s = math.cos(x[2]), math.sin(x[2])
    return np.array([[c, 0.0], [s, 0.0], [0.0, 1.0]])


def rom_dynamics(x, u) -> np.ndarray:
    v, w = u[0], u[1]
    return np.array([v * math.cos(x[2]), v * math.sin(x[2]), w])


def desired_controller(x, params: DesiredParams = DesiredParams()) -> np.ndarray:
    return np.array([params.v_g,
                     params.K_eta * (params.eta_g - x[1]) - params.K_psi * math.sin(x[2])])


# -- geometry and safety functions -------------------------------------------

def _geometry(x, t, track):
    px, py = track.position(t)
    dx, dy = x[0] - px, x[1] - py
    D = math.hypot(dx, dy)
    if D <= DEGENERATE_DISTANCE:
        raise DegenerateGeometry(f"state {tuple(x[:2])} coincides with obstacle at t={t}")
    nx, ny = dx / D, dy / D
    c, s = math.cos(x[2]), math.sin(x[2])
    return D, nx, ny, c, s


def safety_h(x, t: float, track: ObstacleTrack, delta: float = 0.0, R_O: float = 0.75):
    """Heading-penalized distance barrier h = D - R_O + delta n^T q.

    Returns ``(h, grad_h, dh_dt)`` with ``grad_h`` over (xi, eta, psi).
    """
    D, nx, ny, c, s = _geometry(x, t, track)
    nq = nx * c + ny * s
    nr = -nx * s + ny * c
    # q^T P = q^T - (n^T q) n^T
    qPx, qPy = c - nq * nx, s - nq * ny
    h = D - R_O + delta * nq
    grad = np.array([nx + delta * qPx / D, ny + delta * qPy / D, delta * nr])
    vx, vy = track.velocity(t)
    dh_dt = -(nx * vx + ny * vy) - delta * (qPx * vx + qPy * vy) / D
    return h, grad, dh_dt


def backup_h(x, t: float, track: ObstacleTrack, v_max: float = 0.2):
    """Backup-set barrier h_b = n^T (q v_max - p_O').

    Returns ``(h_b, grad_h_b, dh_b_dt)``.
    """
    D, nx, ny, c, s = _geometry(x, t, track)
    vx, vy = track.velocity(t)
    ax, ay = track.acceleration(t)
    wx, wy = c * v_max - vx, s * v_max - vy
    nw = nx * wx + ny * wy
    # w^T P = w^T - (n^T w) n^T
    wPx, wPy = wx - nw * nx, wy - nw * ny
    nr = -nx * s + ny * c
    grad = np.array([wPx / D, wPy / D, nr * v_max])
    dhb_dt = -(wPx * vx + wPy * vy) / D - (nx * ax + ny * ay)
    return nw, grad, dhb_dt


def backup_policy(x, t: float, track: ObstacleTrack, bounds: InputBounds = InputBounds(),
                  epsilon: float = 0.01) -> np.ndarray:
    """Turn away from the obstacle as fast as possible at full speed."""
    D, nx, ny, c, s = _geometry(x, t, track)
    nr = -nx * s + ny * c
    return np.array([bounds.v_max, bounds.omega_max * math.tanh(nr / epsilon)])


def backup_field_jacobian(x, t: float, track: ObstacleTrack, bounds: InputBounds = InputBounds(),
                          epsilon: float = 0.01) -> np.ndarray:
    """Analytic Jacobian of the closed backup loop f_b(x) = f(x) + g(x) k_b(x)."""
    D, nx, ny, c, s = _geometry(x, t, track)
    v = bounds.v_max
    nr = -nx * s + ny * c
    nq = nx * c + ny * s
    th = math.tanh(nr / epsilon)
    k = bounds.omega_max * (1.0 - th * th) / epsilon
    # d(n^T r)/dp = r^T P / D ; d(n^T r)/dpsi = -n^T q
    rPx, rPy = -s - nr * nx, c - nr * ny
    return np.array([[0.0, 0.0, -v * s],
                     [0.0, 0.0, v * c],
                     [k * rPx / D, k * rPy / D, -k * nq]])


def backup_vector_field(track: ObstacleTrack, bounds: InputBounds = InputBounds(),
                        epsilon: float = 0.01) -> VectorField:
    v = bounds.v_max
    w = bounds.omega_max

    def f_b(x, t):
        D, nx, ny, c, s = _geometry(x, t, track)
        return np.array([v * c, v * s, w * math.tanh((-nx * s + ny * c) / epsilon)])

    def jac(x, t):
        return backup_field_jacobian(x, t, track, bounds, epsilon)

    def f_b_and_jac(x, t):
        D, nx, ny, c, s = _geometry(x, t, track)
        nr = -nx * s + ny * c
        nq = nx * c + ny * s
        th = math.tanh(nr / epsilon)
        k = w * (1.0 - th * th) / epsilon
        f = np.array([v * c, v * s, w * th])
        J = np.array([[0.0, 0.0, -v * s],
                      [0.0, 0.0, v * c],
                      [k * (-s - nr * nx) / D, k * (c - nr * ny) / D, -k * nq]])
        return f, J

    return VectorField(dim=3, eval=f_b, jacobian=jac, eval_jacobian=f_b_and_jac)


# -- full-order-system proxy -------------------------------------------------

def _fos_rates(z, u, tau, noise):
    # z = (xi, eta, psi, v_act, omega_act)
    v_eff = z[3] + noise[0]
    w_eff = z[4] + noise[1]
    return np.array([v_eff * math.cos(z[2]), v_eff * math.sin(z[2]), w_eff,
                     (u[0] - z[3]) / tau, (u[1] - z[4]) / tau])


def fos_step(s: FosState, u, dt: float, tau: float = 0.5, noise=None) -> FosState:
    """One RK4 step of the lagged unicycle.

    The actuated rates follow v_act' = (v - v_act) / tau (same for omega).
    ``noise`` is a bounded perturbation (n_v, n_omega) added to the actuated
    rates that drive the pose; it is held constant over the step.
    """
    if tau <= 0 or dt <= 0:
        raise ValueError("tau and dt must be positive")
    nz = (0.0, 0.0) if noise is None else (float(noise[0]), float(noise[1]))
    z = np.array([s.pose[0], s.pose[1], s.pose[2], s.v_act, s.omega_act])
    half = 0.5 * dt
    k1 = _fos_rates(z, u, tau, nz)
    k2 = _fos_rates(z + half * k1, u, tau, nz)
    k3 = _fos_rates(z + half * k2, u, tau, nz)
    k4 = _fos_rates(z + dt * k3, u, tau, nz)
    z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return FosState(pose=z[:3], v_act=float(z[3]), omega_act=float(z[4]))


def discrepancy(s: FosState, u, noise=None) -> np.ndarray:
    """Deviation of the true pose rates from the reduced-order prediction."""
    nv, nw = (0.0, 0.0) if noise is None else noise
    dv = s.v_act + nv - u[0]
    psi = s.pose[2]
    return np.array([dv * math.cos(psi), dv * math.sin(psi), s.omega_act + nw - u[1]])


# -- wiring into the generic safety layer -------------------------------------

def unicycle_model():
    from .safety import ControlAffine
    return ControlAffine(f=rom_drift, g=rom_input_matrix)


def safety_spec(track: ObstacleTrack, delta: float = 0.0, R_O: float = 0.75):
    from .safety import SafetySpec
    return SafetySpec(evaluate=lambda x, t: safety_h(x, t, track, delta, R_O))


def backup_spec(track: ObstacleTrack, bounds: InputBounds = InputBounds(), epsilon: float = 0.01):
    from .safety import BackupSpec
    return BackupSpec(
        evaluate=lambda x, t: backup_h(x, t, track, bounds.v_max),
        k_b=lambda x, t: backup_policy(x, t, track, bounds, epsilon),
        field_jacobian=lambda x, t: backup_field_jacobian(x, t, track, bounds, epsilon),
        dim=3,
        field=backup_vector_field(track, bounds, epsilon),
    )
