"""Track geometry: arc-length parametrized centerline and Frenet conversion.

Lateral offsets are positive to the left of the direction of travel, and
curvature is positive for left turns.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

RESAMPLE_STEP = 0.1


class TrackError(ValueError):
    pass


class TooFewPoints(TrackError):
    pass


class DuplicatePoints(TrackError):
    pass


class OffTrackTooFar(TrackError):
    pass


class FoldOver(TrackError):
    pass


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class GlobalPose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))


@dataclass(frozen=True)
class FrenetPose:
    s: float
    x_lat: float
    theta: float
    c: float = 0.0


@dataclass(frozen=True, eq=False)
class TrackDef:
    points: np.ndarray  # (n, 3): x, y, half-width
    s_cum: np.ndarray
    kappa: np.ndarray
    closed: bool
    total_length: float

    @property
    def xy(self):
        return self.points[:, :2]

    @property
    def widths(self):
        return self.points[:, 2]

    @property
    def n(self):
        return len(self.points)

    @cached_property
    def _segments(self):
        # segment i runs from point i to point i+1 (wrapping when closed)
        p = self.xy
        q = np.roll(p, -1, axis=0) if self.closed else p[1:]
        start = p if self.closed else p[:-1]
        d = q - start
        return start, d, np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def normals(self):
        """Unit left normals at the vertices (central-difference tangents)."""
        p = self.xy
        if self.closed:
            t = np.roll(p, -1, axis=0) - np.roll(p, 1, axis=0)
        else:
            t = np.gradient(p, axis=0)
        t /= np.linalg.norm(t, axis=1)[:, None]
        return np.column_stack([-t[:, 1], t[:, 0]])

    @cached_property
    def headings(self):
        nrm = self.normals
        return np.arctan2(-nrm[:, 0], nrm[:, 1])

    @cached_property
    def max_width(self):
        return float(self.widths.max())

    @cached_property
    def boundaries(self):
        """(left, right) boundary polylines as (n, 2) arrays."""
        off = self.widths[:, None] * self.normals
        return self.xy + off, self.xy - off

    def wrap_s(self, s):
        return np.mod(s, self.total_length) if self.closed else s

    def _locate(self, s):
        s = self.wrap_s(s)
        start, d, seg_len = self._segments
        i = int(np.searchsorted(self.s_cum, s, side="right") - 1)
        i = min(max(i, 0), len(seg_len) - 1)
        t = (s - self.s_cum[i]) / seg_len[i]
        return i, t

    def _vertex(self, i):
        return i % self.n if self.closed else min(i, self.n - 1)

    def interp(self, values, s):
        """Linearly interpolate a per-vertex array at arc length s."""
        i, t = self._locate(s)
        j = self._vertex(i + 1)
        return (1 - t) * values[i] + t * values[j]

    def curvature_at(self, s):
        return float(self.interp(self.kappa, s))

    @cached_property
    def kappa_slope(self):
        """dkappa/ds per vertex (central differences)."""
        if self.closed:
            ds = np.diff(np.append(self.s_cum, self.total_length))
            fwd = (np.roll(self.kappa, -1) - self.kappa) / ds
            return 0.5 * (fwd + np.roll(fwd, 1))
        return np.gradient(self.kappa, self.s_cum)

    def curvature_slope_at(self, s):
        return float(self.interp(self.kappa_slope, s))

    def width_at(self, s):
        return float(self.interp(self.widths, s))

    def frame_at(self, s):
        """Centerline position, unit left normal and heading at s."""
        i, t = self._locate(s)
        j = self._vertex(i + 1)
        start, d, _ = self._segments
        pos = start[i] + t * d[i]
        nrm = (1 - t) * self.normals[i] + t * self.normals[j]
        nrm = nrm / np.hypot(nrm[0], nrm[1])
        return pos, nrm, math.atan2(-nrm[0], nrm[1])


def build_track(raw_points, closed: bool = True, step: float = RESAMPLE_STEP) -> TrackDef:
    """Build a TrackDef from (x, y, w_half) rows, resampled to uniform spacing.

    The centerline is interpolated by a cubic spline (periodic when closed)
    through the raw points and resampled at ``step`` meters of arc length.
    Curvature comes from three-point finite differences on the resampled
    polyline.
    """
    raw = np.asarray(raw_points, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 3:
        raise TrackError("raw points must be rows of (x, y, w)")
    if closed and len(raw) > 1 and np.hypot(*(raw[0, :2] - raw[-1, :2])) < 1e-9:
        raw = raw[:-1]
    if len(raw) < 4:
        raise TooFewPoints(f"need at least 4 points, got {len(raw)}")
    if np.any(raw[:, 2] <= 0):
        raise TrackError("half-widths must be positive")
    pts = np.vstack([raw, raw[:1]]) if closed else raw
    seg = np.hypot(*np.diff(pts[:, :2], axis=0).T)
    if np.any(seg < 1e-9):
        raise DuplicatePoints("consecutive points closer than 1e-9 m")

    u = np.concatenate([[0.0], np.cumsum(seg)])
    spline = CubicSpline(u, pts, bc_type="periodic" if closed else "not-a-knot")
    # arc length of the spline by dense chord accumulation
    dense_u = np.linspace(0.0, u[-1], max(20 * int(u[-1] / step), 10 * len(pts)) + 1)
    dense = spline(dense_u)[:, :2]
    dense_s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(dense, axis=0).T))])
    length = dense_s[-1]
    n = max(int(round(length / step)), 4)
    if closed:
        targets = np.linspace(0.0, length, n + 1)[:-1]
    else:
        targets = np.linspace(0.0, length, n + 1)
    res = spline(np.interp(targets, dense_s, dense_u))
    xy = res[:, :2]
    w = res[:, 2]
    if np.any(w <= 0):
        raise TrackError("interpolated half-width became non-positive")

    closing = np.vstack([xy, xy[:1]]) if closed else xy
    seg = np.hypot(*np.diff(closing, axis=0).T)
    s_cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s_cum[-1])
    s_cum = s_cum[: len(xy)]
    kappa = three_point_curvature(xy, closed)
    return TrackDef(np.column_stack([xy, w]), s_cum, kappa, closed, total)


def three_point_curvature(xy, closed: bool):
    p = np.asarray(xy, dtype=float)
    prev = np.roll(p, 1, axis=0)
    nxt = np.roll(p, -1, axis=0)
    a = np.hypot(*(p - prev).T)
    b = np.hypot(*(nxt - p).T)
    c = np.hypot(*(nxt - prev).T)
    cross = (p[:, 0] - prev[:, 0]) * (nxt[:, 1] - p[:, 1]) - (p[:, 1] - prev[:, 1]) * (nxt[:, 0] - p[:, 0])
    k = 2.0 * cross / (a * b * c)
    if not closed:
        k[0], k[-1] = k[1], k[-2]
    return k


def from_frenet(fr: FrenetPose, track: TrackDef) -> GlobalPose:
    c = track.curvature_at(fr.s)
    if c != 0.0 and abs(fr.x_lat) >= 1.0 / abs(c):
        raise FoldOver(f"|x_lat|={abs(fr.x_lat):.3f} >= 1/|c|={1 / abs(c):.3f}")
    pos, nrm, heading = track.frame_at(fr.s)
    p = pos + fr.x_lat * nrm
    return GlobalPose(float(p[0]), float(p[1]), heading + fr.theta)


def to_frenet(pose: GlobalPose, track: TrackDef) -> FrenetPose:
    """Project a global pose onto the centerline.

    The projection follows the interpolated normal field, which makes it the
    exact inverse of :func:`from_frenet`.
    """
    start, d, seg_len = track._segments
    p = np.array([pose.x, pose.y])
    rel = p - start
    # distance to each segment, to shortlist candidates
    t = np.clip(np.einsum("ij,ij->i", rel, d) / seg_len**2, 0.0, 1.0)
    dist = np.hypot(*(rel - t[:, None] * d).T)
    limit = 2.0 * track.max_width
    if dist.min() > limit:
        raise OffTrackTooFar(f"pose is {dist.min():.3f} m from the centerline (limit {limit:.3f})")
    nseg = len(seg_len)
    best = None
    for i in np.argsort(dist)[:6]:
        j = track._vertex(i + 1)
        n0 = track.normals[i]
        dn = track.normals[j] - n0
        r = rel[i]
        # (r - t d) x (n0 + t dn) = 0, a quadratic in t
        qa = -(d[i, 0] * dn[1] - d[i, 1] * dn[0])
        qb = (r[0] * dn[1] - r[1] * dn[0]) - (d[i, 0] * n0[1] - d[i, 1] * n0[0])
        qc = r[0] * n0[1] - r[1] * n0[0]
        for tt in _quadratic_roots(qa, qb, qc):
            if -1e-12 <= tt <= 1 + 1e-12:
                tt = min(max(tt, 0.0), 1.0)
                nrm = n0 + tt * dn
                nrm = nrm / np.hypot(*nrm)
                x_lat = float((r - tt * d[i]) @ nrm)
                if best is None or abs(x_lat) < abs(best[2]) - 1e-12:
                    best = (i, tt, x_lat, nrm)
    if best is None:
        raise OffTrackTooFar("no normal line through the pose within reach")
    i, tt, x_lat, nrm = best
    s = float(track.s_cum[i] + tt * seg_len[i])
    if track.closed and s >= track.total_length:
        s -= track.total_length
    heading = math.atan2(-nrm[0], nrm[1])
    c = track.curvature_at(s)
    return FrenetPose(s, x_lat, wrap_angle(pose.psi - heading), c)


def _quadratic_roots(a, b, c):
    if abs(a) < 1e-14 * max(1.0, abs(b), abs(c)):
        return [] if b == 0 else [-c / b]
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    sq = math.sqrt(disc)
    # numerically stable pair
    q = -0.5 * (b + math.copysign(sq, b))
    roots = [q / a]
    if q != 0:
        roots.append(c / q)
    return roots


def read_track_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"x", "y", "w_half"} <= set(rows[0]):
        raise TrackError(f"{path}: expected header x,y,w_half")
    return np.array([[float(r["x"]), float(r["y"]), float(r["w_half"])] for r in rows])


def write_track_csv(path, raw_points):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "w_half"])
        for x, y, hw in np.asarray(raw_points, dtype=float):
            w.writerow([f"{x:.6f}", f"{y:.6f}", f"{hw:.6f}"])


def load_track(path, closed: bool = True) -> TrackDef:
    return build_track(read_track_csv(path), closed=closed)


def circle_points(radius, n, w_half, ccw=True):
    a = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    if not ccw:
        a = -a
    return np.column_stack([radius * np.cos(a), radius * np.sin(a), np.full(n, w_half)])


def default_circuit(lane_width: float = 4.0, scale: float = 1.0, n_out: int = 240) -> np.ndarray:
    """The default desk-scale circuit as raw (x, y, w_half) rows.

    About 120 m long at scale 1: straight, 150 deg left corner (R 13 m),
    straight, then a 120 deg (R 20 m) corner running directly into a 90 deg
    (R 11 m) one.  The straight lengths close the loop; curvature is then
    blended over a couple of meters and the small closure drift removed.
    """
    from scipy.ndimage import gaussian_filter1d

    ds = 0.02
    (r1, a1), (r2, a2), (r3, a3) = [(13.0, 150.0), (20.0, 120.0), (11.0, 90.0)]
    a1, a2, a3 = np.deg2rad([a1, a2, a3])

    def chord(r, start, turn):
        # displacement across a left-hand arc
        return r * np.array([np.sin(start + turn) - np.sin(start), np.cos(start) - np.cos(start + turn)])

    corner_sum = chord(r1, 0.0, a1) + chord(r2, a1, a2) + chord(r3, a1 + a2, a3)
    d1 = np.array([1.0, 0.0])
    d2 = np.array([np.cos(a1), np.sin(a1)])
    s1, s2 = np.linalg.solve(np.column_stack([d1, d2]), -corner_sum)

    pieces = [(s1, 0.0), (r1 * a1, 1 / r1), (s2, 0.0), (r2 * a2, 1 / r2), (r3 * a3, 1 / r3)]
    k = np.concatenate([np.full(int(round(n / ds)), kk) for n, kk in pieces])
    k = gaussian_filter1d(k, sigma=1.0 / ds, mode="wrap")
    k *= 2 * np.pi / (k.sum() * ds)
    psi = np.concatenate([[0.0], np.cumsum(k) * ds])[:-1]
    x = np.concatenate([[0.0], np.cumsum(np.cos(psi)) * ds])
    y = np.concatenate([[0.0], np.cumsum(np.sin(psi)) * ds])
    frac = np.linspace(0.0, 1.0, len(x))
    x, y = (x - frac * x[-1])[:-1], (y - frac * y[-1])[:-1]
    idx = np.linspace(0, len(x), n_out, endpoint=False).astype(int)
    return np.column_stack([x[idx] * scale, y[idx] * scale, np.full(n_out, lane_width / 2.0)])
