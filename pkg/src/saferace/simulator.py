"""Closed-loop plant: the Frenet vehicle models driven along a track.

The vehicle models hold curvature constant.  The plant instead carries the
station s alongside the state and evaluates c = kappa(s) inside every RK4
stage, so curvature varies continuously along the motion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .track import FrenetPose, GlobalPose, TrackDef, from_frenet
from .vehicle import (DC, DOMEGA, DTHETA, DV, DVPERP, DX, DYNAMIC, KC, KINEMATIC, KTHETA, KV, KX,
                      VehicleParams, derivative, downshift, upshift)

# upshift once v exceeds the floor by this much (avoids chattering at the floor)
UPSHIFT_MARGIN = 0.2


def station_rate(model, x):
    """ds/dt of the centerline projection."""
    if model == KINEMATIC:
        return x[KV] * math.cos(x[KTHETA]) / (1.0 - x[KX] * x[KC])
    return (x[DV] * math.cos(x[DTHETA]) - x[DVPERP] * math.sin(x[DTHETA])) / (1.0 - x[DX] * x[DC])


def plant_step(model, x, s, u, dt, p: VehicleParams, track: TrackDef):
    """One RK4 step of (state, station) with c = kappa(s) at every stage."""
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    c_idx = KC if model == KINEMATIC else DC
    u = np.asarray(u, dtype=float)

    def f(x, s):
        x = x.copy()
        x[c_idx] = track.curvature_at(s)
        return derivative(model, x, u, p), station_rate(model, x)

    k1, q1 = f(x, s)
    k2, q2 = f(x + 0.5 * dt * k1, s + 0.5 * dt * q1)
    k3, q3 = f(x + 0.5 * dt * k2, s + 0.5 * dt * q2)
    k4, q4 = f(x + dt * k3, s + dt * q3)
    xn = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    sn = s + dt / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)
    xn[c_idx] = track.curvature_at(sn)
    return xn, sn


def curvature_preview(track: TrackDef, model, x, s, dt):
    """(dc, c_rate) over half a hold: curvature change and rate at the midpoint."""
    sd = station_rate(model, x)
    s_mid = s + 0.5 * dt * sd
    return track.curvature_at(s_mid) - track.curvature_at(s), track.curvature_slope_at(s_mid) * sd


@dataclass
class Vehicle:
    """Mutable plant state with automatic model switching at the speed floor."""

    x: np.ndarray
    s: float                 # unwrapped progress along the centerline
    model: str
    p: VehicleParams
    track: TrackDef
    t: float = 0.0
    preferred: str = field(default=DYNAMIC)
    last_u: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def on_reference(cls, track, p, model, alpha, theta, v, kappa, s=0.0):
        c = track.curvature_at(s)
        if model == DYNAMIC:
            x = np.array([alpha, theta, v * kappa, v, 0.0, c])
        else:
            x = np.array([alpha, theta, v, c])
        veh = cls(x, s, model, p, track, preferred=model)
        veh._switch()
        return veh

    @property
    def x_lat(self):
        return float(self.x[KX if self.model == KINEMATIC else DX])

    @property
    def theta(self):
        return float(self.x[KTHETA if self.model == KINEMATIC else DTHETA])

    @property
    def speed(self):
        return float(self.x[KV if self.model == KINEMATIC else DV])

    @property
    def c(self):
        return float(self.x[KC if self.model == KINEMATIC else DC])

    def speeds(self):
        """(v, v_perp, omega) as measured by the on-board sensors."""
        if self.model == KINEMATIC:
            v = self.x[KV]
            return float(v), 0.0, float(v * math.sin(self.last_u[0]) / self.p.wheelbase)
        return float(self.x[DV]), float(self.x[DVPERP]), float(self.x[DOMEGA])

    def dynamic_state(self):
        """The state in dynamic-model coordinates (upshifted if needed)."""
        return self.x.copy() if self.model == DYNAMIC else upshift(self.x, self.p)

    def frenet(self) -> FrenetPose:
        return FrenetPose(float(self.track.wrap_s(self.s)), self.x_lat, self.theta, self.c)

    def pose(self) -> GlobalPose:
        return from_frenet(self.frenet(), self.track)

    def preview(self, dt):
        return curvature_preview(self.track, self.model, self.x, self.s, dt)

    def _switch(self):
        if self.model == DYNAMIC and self.x[DV] < self.p.v_min_dynamic:
            self.x = downshift(self.x)
            self.model = KINEMATIC
        elif (self.model == KINEMATIC and self.preferred == DYNAMIC
              and self.x[KV] >= self.p.v_min_dynamic + UPSHIFT_MARGIN):
            self.x = upshift(self.x, self.p, float(self.last_u[0]))
            self.model = DYNAMIC

    def step(self, u, dt):
        u = np.clip(np.asarray(u, dtype=float), [-self.p.delta_max, -self.p.a_x_max],
                    [self.p.delta_max, self.p.a_x_max])
        if self.model == DYNAMIC and self.x[DV] + u[1] * dt < self.p.v_min_dynamic:
            self.x = downshift(self.x)
            self.model = KINEMATIC
        if self.model == KINEMATIC:
            # no reversing: cap braking so v stays >= 0 over the step
            u[1] = max(u[1], -self.x[KV] / dt)
        self.x, self.s = plant_step(self.model, self.x, self.s, u, dt, self.p, self.track)
        self.t += dt
        self.last_u = u
        self._switch()
        return u
