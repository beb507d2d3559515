"""Fixed-step flow integration for the backup closed loop.

The backup flow phi_b(theta, x) and its sensitivity Q(theta, x) = d phi_b / dx
are integrated jointly with classical RK4:

    phi' = f_b(phi, t + theta),        phi(0) = x
    Q'   = df_b/dx(phi, t + theta) Q,  Q(0)   = I

Samples are recorded on the grid theta_i = i T / N_c.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class IntegrationDiverged(ArithmeticError):
    """Raised when an integration step produces NaN or Inf."""

    def __init__(self, t: float):
        super().__init__(f"integration diverged at t={t!r}")
        self.t = t


@dataclass(frozen=True)
class VectorField:
    """Time-varying vector field x' = eval(x, t) with state Jacobian.

    ``eval_jacobian``, when given, returns both at once and is used by the
    sensitivity integrator to share work between the two.
    """

    dim: int
    eval: Callable[[np.ndarray, float], np.ndarray]
    jacobian: Callable[[np.ndarray, float], np.ndarray]
    eval_jacobian: Optional[Callable[[np.ndarray, float], tuple]] = None

    def both(self, x, t) -> tuple:
        if self.eval_jacobian is not None:
            return self.eval_jacobian(x, t)
        return self.eval(x, t), self.jacobian(x, t)


@dataclass(frozen=True)
class BackupFlow:
    horizon: float
    grid_count: int
    thetas: np.ndarray  # (N_c + 1,)
    states: np.ndarray  # (N_c + 1, n)
    sens: Optional[np.ndarray]  # (N_c + 1, n, n), None if not requested
    base_time: float = 0.0

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def rk4_step(field: VectorField, x, t: float, dt: float) -> np.ndarray:
    """Advance ``x`` by one classical RK4 step of size ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape != (field.dim,):
        raise ValueError(f"state has shape {x.shape}, field expects ({field.dim},)")
    out = _rk4(field.eval, x, t, dt)
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(t + dt)
    return out


def _rk4(f, x, t, dt):
    half = 0.5 * dt
    k1 = f(x, t)
    k2 = f(x + half * k1, t + half)
    k3 = f(x + half * k2, t + half)
    k4 = f(x + dt * k3, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_augmented(field: VectorField, x, Q, t, dt):
    both = field.both
    half = 0.5 * dt
    t_mid = t + half
    k1, J1 = both(x, t)
    K1 = J1 @ Q
    k2, J2 = both(x + half * k1, t_mid)
    K2 = J2 @ (Q + half * K1)
    k3, J3 = both(x + half * k2, t_mid)
    K3 = J3 @ (Q + half * K2)
    k4, J4 = both(x + dt * k3, t + dt)
    K4 = J4 @ (Q + dt * K3)
    c = dt / 6.0
    return (x + c * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
            Q + c * (K1 + 2.0 * K2 + 2.0 * K3 + K4))


def integrate_backup_flow(field: VectorField, x, t: float, T: float, N_c: int,
                          substeps: int = 5, sensitivity: bool = True) -> BackupFlow:
    """Integrate the backup flow from ``x`` launched at wall time ``t``.

    The integration step is ``T / (N_c * substeps)``. With ``sensitivity=False``
    only the state is propagated and ``BackupFlow.sens`` is None.
    """
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if N_c < 1 or substeps < 1:
        raise ValueError("N_c and substeps must be >= 1")
    x = np.asarray(x, dtype=float)
    n = field.dim
    if x.shape != (n,):
        raise ValueError(f"state has shape {x.shape}, field expects ({n},)")

    thetas = np.arange(N_c + 1) * (T / N_c)
    dt = T / (N_c * substeps)
    states = np.empty((N_c + 1, n))
    states[0] = x
    sens = None
    if sensitivity:
        sens = np.empty((N_c + 1, n, n))
        sens[0] = np.eye(n)
        Q = sens[0].copy()

    cur = x.copy()
    for i in range(N_c):
        for j in range(substeps):
            tau = t + thetas[i] + j * dt
            if sensitivity:
                cur, Q = _rk4_augmented(field, cur, Q, tau, dt)
            else:
                cur = _rk4(field.eval, cur, tau, dt)
        if not np.all(np.isfinite(cur)) or (sensitivity and not np.all(np.isfinite(Q))):
            raise IntegrationDiverged(t + thetas[i + 1])
        states[i + 1] = cur
        if sensitivity:
            sens[i + 1] = Q
    return BackupFlow(horizon=float(T), grid_count=int(N_c), thetas=thetas,
                      states=states, sens=sens, base_time=float(t))


def flow_to(field: VectorField, x, t: float, theta: float, steps: int) -> np.ndarray:
    """State of the flow at duration ``theta`` using ``steps`` RK4 steps."""
    x = np.asarray(x, dtype=float)
    if theta == 0:
        return x.copy()
    dt = theta / steps
    cur = x
    for j in range(steps):
        cur = rk4_step(field, cur, t + j * dt, dt)
    return cur


def fd_sensitivity(field: VectorField, x, t: float, theta: float, eps: float = 1e-6,
                   step: float = 0.01) -> np.ndarray:
    """Central-difference estimate of d phi(theta, x) / dx.

    Each of the 2 * dim re-integrations uses RK4 with step close to ``step``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    n = field.dim
    steps = max(1, int(round(theta / step))) if theta > 0 else 1
    out = np.empty((n, n))
    for k in range(n):
        dx = np.zeros(n)
        dx[k] = eps
        plus = flow_to(field, x + dx, t, theta, steps)
        minus = flow_to(field, x - dx, t, theta, steps)
        out[:, k] = (plus - minus) / (2.0 * eps)
    return out
