"""Minimum-curvature racing line and friction-limited velocity profile."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import qpsolver
from .track import TrackDef, three_point_curvature, wrap_angle


class RacelineError(ValueError):
    pass


class Infeasible(RacelineError):
    pass


@dataclass(frozen=True)
class VelocityLimits:
    a_lat_max: float = 6.0
    a_lon_accel_max: float = 3.0
    a_lon_brake_max: float = 5.0
    v_max: float = 14.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


@dataclass
class CurvatureQP:
    """The linearized min-curvature problem on a coarse station grid.

    Offset-path curvature is modelled as kappa + kappa^2 * alpha + alpha'',
    so the cost is || kappa + M alpha ||^2 with M = D2 + diag(kappa^2).
    """

    s: np.ndarray
    kappa: np.ndarray
    bound: np.ndarray
    M: np.ndarray
    closed: bool

    def objective(self, alpha):
        r = self.kappa + self.M @ alpha
        return float(r @ r)

    def problem(self) -> qpsolver.QPProblem:
        n = len(self.s)
        H = 2.0 * self.M.T @ self.M
        H = 0.5 * (H + H.T)
        f = 2.0 * self.M.T @ self.kappa
        A = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([self.bound, self.bound])
        return qpsolver.QPProblem(H, f, A, b)


def curvature_qp(track: TrackDef, w_veh: float, step: float = 1.0) -> CurvatureQP:
    if w_veh <= 0:
        raise ValueError("w_veh must be positive")
    if w_veh >= 2.0 * track.widths.min():
        raise Infeasible(f"vehicle width {w_veh} leaves no room on a track of min half-width "
                         f"{track.widths.min():.3f}")
    L = track.total_length
    n = max(int(round(L / step)), 8)
    s = np.linspace(0.0, L, n, endpoint=not track.closed)
    h = L / n if track.closed else L / (n - 1)
    kappa = np.array([track.curvature_at(si) for si in s])
    bound = np.array([track.width_at(si) for si in s]) - w_veh / 2.0
    D2 = np.zeros((n, n))
    rows = range(n) if track.closed else range(1, n - 1)
    for i in rows:
        D2[i, (i - 1) % n] += 1.0
        D2[i, i] -= 2.0
        D2[i, (i + 1) % n] += 1.0
    D2 /= h * h
    if not track.closed:
        kappa[0] = kappa[-1] = 0.0  # no curvature defined at open ends
    M = D2 + np.diag(kappa**2)
    return CurvatureQP(s, kappa, bound, M, track.closed)


def min_curvature_line(track: TrackDef, w_veh: float, step: float = 1.0, method: str = "auto"):
    """Lateral offsets (one per track point) of the minimum-curvature line."""
    qp = curvature_qp(track, w_veh, step)
    # the centerline is always feasible; starting there avoids a vertex start
    sol = qpsolver.solve(qp.problem(), method=method, x0=np.zeros(len(qp.s)))
    if not sol.ok:
        raise qpsolver.QPFailure(sol.status, "raceline QP")
    alpha = sol.u_star
    if track.closed:
        s_ext = np.append(qp.s, track.total_length)
        spline = CubicSpline(s_ext, np.append(alpha, alpha[0]), bc_type="periodic")
    else:
        spline = CubicSpline(qp.s, alpha)
    fine = spline(track.s_cum)
    bound = track.widths - w_veh / 2.0
    return np.clip(fine, -bound, bound)


def offset_path(track: TrackDef, alpha):
    return track.xy + np.asarray(alpha)[:, None] * track.normals


def path_curvature(track: TrackDef, alpha):
    """Exact three-point curvature of the offset polyline."""
    return three_point_curvature(offset_path(track, alpha), track.closed)


def sum_sq_curvature(track: TrackDef, alpha):
    """Arc-length weighted sum of squared curvature of the offset path."""
    pts = offset_path(track, alpha)
    k = three_point_curvature(pts, track.closed)
    closing = np.vstack([pts, pts[:1]]) if track.closed else pts
    seg = np.hypot(*np.diff(closing, axis=0).T)
    ds = 0.5 * (seg + np.roll(seg, 1)) if track.closed else np.gradient(np.concatenate([[0], np.cumsum(seg)]))
    return float(np.sum(k**2 * ds))


def _available(limit, v, kappa, a_lat):
    ratio = v * v * abs(kappa) / a_lat
    return limit * np.sqrt(max(0.0, 1.0 - ratio * ratio))


def velocity_profile(kappa, ds, limits: VelocityLimits, closed: bool = True, tol: float = 1e-4,
                     max_sweeps: int = 100):
    """Forward/backward pass speed profile.

    ``ds[i]`` is the distance from point i to point i+1 (wrapping when closed,
    so ``len(ds) == len(kappa)``; otherwise ``len(kappa) - 1``).  Returns
    (v, a_x) per point.
    """
    kappa = np.asarray(kappa, dtype=float)
    ds = np.asarray(ds, dtype=float)
    n = len(kappa)
    if n < 2:
        raise ValueError("need at least two points")
    with np.errstate(divide="ignore"):
        cap = np.where(np.abs(kappa) > 0, np.sqrt(limits.a_lat_max / np.abs(kappa)), np.inf)
    cap = np.maximum(np.minimum(cap, limits.v_max), 0.1)
    v = cap.copy()
    links = n if closed else n - 1
    for _ in range(max_sweeps):
        prev = v.copy()
        for i in range(links):
            j = (i + 1) % n
            acc = _available(limits.a_lon_accel_max, v[i], kappa[i], limits.a_lat_max)
            v[j] = min(v[j], np.sqrt(v[i] ** 2 + 2.0 * acc * ds[i]))
        for i in reversed(range(links)):
            j = (i + 1) % n
            brk = _available(limits.a_lon_brake_max, v[j], kappa[j], limits.a_lat_max)
            v[i] = min(v[i], np.sqrt(v[j] ** 2 + 2.0 * brk * ds[i]))
        v = np.maximum(v, 0.1)
        if np.abs(v - prev).max() < tol:
            break
    a_x = np.zeros(n)
    nxt = np.roll(v, -1)
    a_x[:links] = (nxt[:links] ** 2 - v[:links] ** 2) / (2.0 * ds[:links])
    if not closed:
        a_x[-1] = a_x[-2]
    return v, a_x


@dataclass
class RacelineTrajectory:
    """Per-point reference: station s on the centerline, position, offset, heading, speed."""

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    alpha: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray
    v_x: np.ndarray
    a_x: np.ndarray
    theta: np.ndarray  # heading relative to the centerline
    c_center: np.ndarray  # centerline curvature at the same stations
    total_length: float
    closed: bool = True

    def __post_init__(self):
        table = np.vstack([self.alpha, self.theta, self.v_x, self.a_x, self.kappa, self.c_center])
        if self.closed:
            self._xp = np.append(self.s, self.total_length)
            self._table = np.hstack([table, table[:, :1]])
        else:
            self._xp = self.s
            self._table = table

    def sample(self, s):
        """Linear interpolation of (alpha, theta, v_x, a_x, kappa, c_center) at station(s) s."""
        s = np.mod(s, self.total_length) if self.closed else s
        return tuple(np.interp(s, self._xp, row) for row in self._table)

    def speed_at(self, s):
        s = np.mod(s, self.total_length) if self.closed else s
        return np.interp(s, self._xp, self._table[2])

    def alpha_at(self, s):
        s = np.mod(s, self.total_length) if self.closed else s
        return np.interp(s, self._xp, self._table[0])


def build_trajectory(track: TrackDef, alpha, limits: VelocityLimits) -> RacelineTrajectory:
    alpha = np.asarray(alpha, dtype=float)
    pts = offset_path(track, alpha)
    if track.closed:
        tangent = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
        seg = np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)
    else:
        tangent = np.gradient(pts, axis=0)
        seg = np.hypot(*np.diff(pts, axis=0).T)
    psi = np.arctan2(tangent[:, 1], tangent[:, 0])
    kappa = three_point_curvature(pts, track.closed)
    v, a_x = velocity_profile(kappa, seg, limits, closed=track.closed)
    theta = wrap_angle(psi - track.headings)
    return RacelineTrajectory(track.s_cum.copy(), pts[:, 0], pts[:, 1], alpha, psi, kappa, v, a_x,
                              theta, track.kappa.copy(), track.total_length, track.closed)


def compute_raceline(track: TrackDef, w_veh: float, limits: VelocityLimits, step: float = 1.0):
    return build_trajectory(track, min_curvature_line(track, w_veh, step), limits)


def centerline_reference(track: TrackDef, limits: VelocityLimits):
    return build_trajectory(track, np.zeros(track.n), limits)


CSV_HEADER = ["s", "x", "y", "alpha", "psi", "kappa", "v_x", "a_x"]


def write_raceline_csv(path, traj: RacelineTrajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in zip(traj.s, traj.x, traj.y, traj.alpha, traj.psi, traj.kappa, traj.v_x, traj.a_x):
            w.writerow([f"{val:.9g}" for val in row])


def read_raceline_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in CSV_HEADER}
