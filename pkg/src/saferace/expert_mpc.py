"""Expert controller: LTV tracking MPC along the racing line, plus a speed PID."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .raceline import RacelineTrajectory
from .vehicle import (DC, DOMEGA, DTHETA, DV, DVPERP, DX, DYNAMIC, KC, KINEMATIC, KTHETA, KV, KX,
                      VehicleParams, linearize, state_dim)

# per-state tracking weights by model, in state order
DEFAULT_Q = {
    DYNAMIC: (10.0, 5.0, 0.1, 1.0, 0.1, 0.0),
    KINEMATIC: (10.0, 5.0, 1.0, 0.0),
}


@dataclass
class MPCConfig:
    N: int = 20
    dt: float = 0.05
    Q: tuple | None = None
    R: tuple = (5.0, 0.5)
    terminal_scale: float = 5.0
    Q_N: tuple | None = None

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("horizon N must be >= 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.R) < 0 or max(self.R) <= 0:
            raise ValueError("R weights must be >= 0 with at least one positive")

    def weights(self, model):
        q = np.asarray(self.Q if self.Q is not None else DEFAULT_Q[model], dtype=float)
        if len(q) != state_dim(model):
            q = np.asarray(DEFAULT_Q[model], dtype=float)
        if q.min() < 0 or q.max() <= 0:
            raise ValueError("Q weights must be >= 0 with at least one positive")
        qn = np.asarray(self.Q_N, dtype=float) if self.Q_N is not None else self.terminal_scale * q
        return np.diag(q), np.diag(np.asarray(self.R, dtype=float)), np.diag(qn)


@dataclass
class ReferenceWindow:
    s: np.ndarray       # (N+1,) stations
    x_ref: np.ndarray   # (N+1, nx)
    u_ff: np.ndarray    # (N, 2) feed-forward controls
    model: str

    @property
    def v_target(self):
        """Target speed handed to the speed loop: the reference one step ahead."""
        return float(self.x_ref[1, KV if self.model == KINEMATIC else DV])


def feedforward_steer(kappa, model, p: VehicleParams):
    if model == DYNAMIC:
        return p.steer_for_curvature(kappa)
    return math.asin(max(-1.0, min(1.0, p.wheelbase * kappa)))


def reference_states(raceline: RacelineTrajectory, s_now: float, cfg: MPCConfig, model: str,
                     p: VehicleParams) -> ReferenceWindow:
    """Sample N+1 reference states ahead of station ``s_now`` at spacing v_ref * dt."""
    nx = state_dim(model)
    s = np.empty(cfg.N + 1)
    s[0] = s_now
    for k in range(cfg.N):
        s[k + 1] = s[k] + max(float(raceline.speed_at(s[k])), 0.1) * cfg.dt
    alpha, theta, v, a_x, kappa, c = raceline.sample(s)
    if model == DYNAMIC:
        x_ref = np.column_stack([alpha, theta, v * kappa, v, np.zeros_like(v), c])
    else:
        x_ref = np.column_stack([alpha, theta, v, c])
    u_ff = np.column_stack([[feedforward_steer(k, model, p) for k in kappa[:-1]], a_x[:-1]])
    return ReferenceWindow(s, x_ref, u_ff, model)


@dataclass
class MPCResult:
    control: np.ndarray      # first control, clamped
    u_seq: np.ndarray        # (N, 2)
    x_pred: np.ndarray       # (N+1, nx)
    objective: float
    v_target: float
    qp: qpsolver.QPSolution = field(repr=False, default=None)


def prediction_matrices(x0, window: ReferenceWindow, model, cfg: MPCConfig, p: VehicleParams):
    """Condensed LTV prediction X = Sx x0 + Su U + Sc for k = 1..N.

    The dynamics are linearized along the reference; curvature is treated as
    a known schedule taken from the reference rather than held constant.
    """
    nx, nu, N = len(x0), 2, cfg.N
    c_idx = KC if model == KINEMATIC else DC
    Sx = np.zeros((N * nx, nx))
    Su = np.zeros((N * nx, N * nu))
    Sc = np.zeros(N * nx)
    Phi = np.eye(nx)
    G = np.zeros((nx, N * nu))
    d = np.zeros(nx)
    for k in range(N):
        A, B, C = linearize(model, window.x_ref[k], window.u_ff[k], cfg.dt, p)
        A[c_idx, :] = 0.0
        B[c_idx, :] = 0.0
        C[c_idx] = window.x_ref[k + 1, c_idx]
        Phi = A @ Phi
        G = A @ G
        G[:, k * nu:(k + 1) * nu] += B
        d = A @ d + C
        Sx[k * nx:(k + 1) * nx] = Phi
        Su[k * nx:(k + 1) * nx] = G
        Sc[k * nx:(k + 1) * nx] = d
    return Sx, Su, Sc


def mpc_solve(x0, window: ReferenceWindow, model: str, cfg: MPCConfig, p: VehicleParams,
              warm_start=None) -> MPCResult:
    x0 = np.asarray(x0, dtype=float)
    nx, nu, N = len(x0), 2, cfg.N
    Q, R, QN = cfg.weights(model)
    Sx, Su, Sc = prediction_matrices(x0, window, model, cfg, p)
    Qbar = np.kron(np.eye(N), Q)
    Qbar[-nx:, -nx:] = QN
    Rbar = np.kron(np.eye(N), R)
    uff = window.u_ff.ravel()
    e0 = Sx @ x0 + Sc - window.x_ref[1:].ravel()
    QSu = Qbar @ Su
    H = 2.0 * (Su.T @ QSu + Rbar)
    H = 0.5 * (H + H.T)
    f = 2.0 * (QSu.T @ e0 - Rbar @ uff)
    const = float(e0 @ Qbar @ e0 + uff @ Rbar @ uff)
    ub = np.tile([p.delta_max, p.a_x_max], N)
    A_in = np.vstack([np.eye(N * nu), -np.eye(N * nu)])
    b_in = np.concatenate([ub, ub])
    prob = qpsolver.QPProblem(H, f, A_in, b_in)
    x_init = None
    if warm_start is not None:
        x_init = np.clip(np.asarray(warm_start, dtype=float).ravel(), -ub, ub)
    else:
        x_init = np.clip(uff, -ub, ub)
    sol = qpsolver.solve(prob, method="active_set", x0=x_init)
    if not sol.ok:
        raise qpsolver.QPFailure(sol.status, "expert MPC")
    U = sol.u_star
    X = (Sx @ x0 + Su @ U + Sc).reshape(N, nx)
    u_seq = U.reshape(N, nu)
    control = np.clip(u_seq[0], [-p.delta_max, -p.a_x_max], [p.delta_max, p.a_x_max])
    return MPCResult(control, u_seq, np.vstack([x0, X]), sol.objective + const, window.v_target, sol)


def shifted(u_seq):
    """Warm start for the next solve: drop the first control, repeat the last."""
    u_seq = np.asarray(u_seq)
    return np.vstack([u_seq[1:], u_seq[-1:]])


@dataclass(frozen=True)
class PIDGains:
    kp: float = 2.0
    ki: float = 0.2
    kd: float = 0.0
    integral_limit: float = 5.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")


@dataclass
class PIDState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_speed(v_target, v, gains: PIDGains, dt, state: PIDState, a_max: float = math.inf,
              update: bool = True) -> float:
    """Longitudinal acceleration command driving v toward v_target.

    With ``update=False`` the integrator state is read but left untouched.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    err = v_target - v
    integral = max(-gains.integral_limit, min(gains.integral_limit, state.integral + err * dt))
    deriv = 0.0 if state.prev_error is None else (err - state.prev_error) / dt
    a = gains.kp * err + gains.ki * integral + gains.kd * deriv
    if update:
        state.integral = integral
        state.prev_error = err
    return max(-a_max, min(a_max, a))
