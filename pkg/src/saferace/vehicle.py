"""Kinematic and linear-tire dynamic bicycle models in the Frenet frame.

States are plain numpy vectors:

    kinematic  [x_lat, theta, v, c]
    dynamic    [x_lat, theta, omega, v, v_perp, c]

and controls are ``[delta, a_x]``.  Curvature ``c`` is constant inside the
models; the simulator refreshes it from the track after every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

KINEMATIC = "kinematic"
DYNAMIC = "dynamic"

# index constants
KX, KTHETA, KV, KC = range(4)
DX, DTHETA, DOMEGA, DV, DVPERP, DC = range(6)


class BelowSpeedFloor(ValueError):
    """The dynamic model was asked to work below its minimum speed."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1200.0
    Iz: float = 2000.0
    l_f: float = 1.25
    l_r: float = 1.25
    C_f: float = 30000.0
    C_r: float = 30000.0
    delta_max: float = 0.45
    a_x_max: float = 6.0
    v_min_dynamic: float = 0.5
    wheelbase: float | None = None

    def __post_init__(self):
        if self.wheelbase is None:
            object.__setattr__(self, "wheelbase", self.l_f + self.l_r)
        for name in ("m", "Iz", "l_f", "l_r", "C_f", "C_r", "delta_max", "a_x_max", "v_min_dynamic"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.wheelbase - (self.l_f + self.l_r)) > 1e-9:
            raise ValueError("wheelbase must equal l_f + l_r")

    @property
    def yaw_damping(self):
        """Coefficient k with omega_dot = -k/v * omega + ..."""
        return 2.0 * (self.l_f**2 * self.C_f + self.l_r**2 * self.C_r) / self.Iz

    @property
    def yaw_gain(self):
        return 2.0 * self.l_f * self.C_f / self.Iz

    @property
    def lateral_damping(self):
        """Coefficient k with v_perp_dot = -k/v * v_perp."""
        return 2.0 * (self.C_f + self.C_r) / self.m

    def steady_yaw_rate(self, v, delta):
        """Yaw rate at which omega_dot vanishes for fixed (v, delta)."""
        return self.yaw_gain * delta * v / self.yaw_damping

    def steer_for_curvature(self, kappa):
        """Steering that holds yaw rate v * kappa in steady state (any v)."""
        return kappa * self.yaw_damping / self.yaw_gain

    def to_dict(self):
        return asdict(self)


@dataclass
class KinematicState:
    x_lat: float
    theta: float
    v: float
    c: float = 0.0

    def to_array(self):
        return np.array([self.x_lat, self.theta, self.v, self.c])

    @classmethod
    def from_array(cls, a):
        return cls(*map(float, a))


@dataclass
class DynamicState:
    x_lat: float
    theta: float
    omega: float
    v: float
    v_perp: float = 0.0
    c: float = 0.0

    def to_array(self):
        return np.array([self.x_lat, self.theta, self.omega, self.v, self.v_perp, self.c])

    @classmethod
    def from_array(cls, a):
        return cls(*map(float, a))


@dataclass
class Control:
    delta: float
    a_x: float

    def to_array(self):
        return np.array([self.delta, self.a_x])

    def clamped(self, p: VehicleParams) -> "Control":
        return Control(float(np.clip(self.delta, -p.delta_max, p.delta_max)),
                       float(np.clip(self.a_x, -p.a_x_max, p.a_x_max)))


def state_dim(model):
    return 4 if model == KINEMATIC else 6


def speed_index(model):
    return KV if model == KINEMATIC else DV


def kinematic_derivative(x, u, p: VehicleParams):
    xl, th, v, c = x
    delta, ax = u
    return np.array([v * math.sin(th), v * math.sin(delta) / p.wheelbase - v * c, ax, 0.0])


def dynamic_derivative(x, u, p: VehicleParams):
    xl, th, om, v, vp, c = x
    delta, ax = u
    if v < p.v_min_dynamic:
        raise BelowSpeedFloor(f"v={v:.3f} below v_min_dynamic={p.v_min_dynamic}")
    return np.array([
        v * math.sin(th) + vp * math.cos(th),
        om - v * c,
        -p.yaw_damping / v * om + p.yaw_gain * delta,
        ax,
        -p.lateral_damping / v * vp,
        0.0,
    ])


def derivative(model, x, u, p: VehicleParams):
    if model == KINEMATIC:
        return kinematic_derivative(x, u, p)
    if model == DYNAMIC:
        return dynamic_derivative(x, u, p)
    raise ValueError(f"unknown model {model!r}")


def integrate(model, x, u, dt, p: VehicleParams):
    """One classical RK4 step with the control held constant."""
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = derivative(model, x, u, p)
    k2 = derivative(model, x + 0.5 * dt * k1, u, p)
    k3 = derivative(model, x + 0.5 * dt * k2, u, p)
    k4 = derivative(model, x + dt * k3, u, p)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def jacobians(model, x, u, p: VehicleParams):
    """Continuous-time Jacobians (df/dx, df/du)."""
    if model == KINEMATIC:
        xl, th, v, c = x
        delta, ax = u
        Jx = np.zeros((4, 4))
        Jx[KX, KTHETA] = v * math.cos(th)
        Jx[KX, KV] = math.sin(th)
        Jx[KTHETA, KV] = math.sin(delta) / p.wheelbase - c
        Jx[KTHETA, KC] = -v
        Ju = np.zeros((4, 2))
        Ju[KTHETA, 0] = v * math.cos(delta) / p.wheelbase
        Ju[KV, 1] = 1.0
        return Jx, Ju
    xl, th, om, v, vp, c = x
    if v < p.v_min_dynamic:
        raise BelowSpeedFloor(f"v={v:.3f} below v_min_dynamic={p.v_min_dynamic}")
    Jx = np.zeros((6, 6))
    Jx[DX, DTHETA] = v * math.cos(th) - vp * math.sin(th)
    Jx[DX, DV] = math.sin(th)
    Jx[DX, DVPERP] = math.cos(th)
    Jx[DTHETA, DOMEGA] = 1.0
    Jx[DTHETA, DV] = -c
    Jx[DTHETA, DC] = -v
    Jx[DOMEGA, DOMEGA] = -p.yaw_damping / v
    Jx[DOMEGA, DV] = p.yaw_damping * om / v**2
    Jx[DVPERP, DV] = p.lateral_damping * vp / v**2
    Jx[DVPERP, DVPERP] = -p.lateral_damping / v
    Ju = np.zeros((6, 2))
    Ju[DOMEGA, 0] = p.yaw_gain
    Ju[DV, 1] = 1.0
    return Jx, Ju


def linearize(model, x, u, dt, p: VehicleParams):
    """Forward-Euler discretization of the model linearized at (x, u).

    Returns (A, B, C) with x_next ~= A x + B u + C.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f = derivative(model, x, u, p)
    Jx, Ju = jacobians(model, x, u, p)
    A = np.eye(len(x)) + dt * Jx
    B = dt * Ju
    C = dt * (f - Jx @ x - Ju @ u)
    return A, B, C


def downshift(x_dyn):
    """Dynamic -> kinematic handoff (drops omega and v_perp)."""
    return np.array([x_dyn[DX], x_dyn[DTHETA], x_dyn[DV], x_dyn[DC]])


def upshift(x_kin, p: VehicleParams, delta=0.0):
    """Kinematic -> dynamic handoff; yaw rate starts at its steady value, v_perp at 0."""
    v = x_kin[KV]
    return np.array([x_kin[KX], x_kin[KTHETA], p.steady_yaw_rate(v, delta), v, 0.0, x_kin[KC]])
