"""Probabilistic higher-order CBF safety filter for lane keeping.

Four barriers guard the vehicle:

    left      h = L/2 - x_lat        (3rd order in steering)
    right     h = L/2 + x_lat
    theta_left   h = theta_max - theta   (2nd order)
    theta_right  h = theta_max + theta

The lane conditions are built on L/2 - lane_buffer, a small guard band
inside the boundary; reported h values use the true boundary.

Each CBF condition is affine in U = [delta, a_x] and is returned as a row
``a . U <= b``.  Under state uncertainty, rows are evaluated on every state
sample and tightened to a deterministic chance constraint with confidence
eta; the filter then solves a slack-relaxed QP around the learner's control.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .belief import GaussianBelief
from .vehicle import (DC, DTHETA, DV, DX, DYNAMIC, KC, KINEMATIC, KTHETA, KX, BelowSpeedFloor,
                      VehicleParams, downshift, integrate)

log = logging.getLogger(__name__)

LABELS = ("left", "right", "theta_left", "theta_right")


@dataclass(frozen=True)
class CBFParams:
    lane_width: float = 4.0
    lam: float = 2.5
    theta_max: float = math.pi / 4
    eta: float = 0.95
    k_err: float = 1e8
    n_rollouts: int = 10
    sigma_min: float = 1e-3
    fixed_point_iters: int = 2
    # the lane rows keep this far inside the boundary; it absorbs the slip
    # of a continuous-time condition enforced only at sample instants
    lane_buffer: float = 0.01

    @property
    def guarded_half_width(self):
        return 0.5 * self.lane_width - self.lane_buffer

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.5 < self.eta < 1.0:
            raise ValueError("eta must lie in (0.5, 1)")
        if not 0.0 < self.theta_max < math.pi / 2:
            raise ValueError("theta_max must lie in (0, pi/2)")
        if self.k_err <= 0:
            raise ValueError("k_err must be positive")
        if self.n_rollouts < 2:
            raise ValueError("n_rollouts must be >= 2")
        if not 0.0 <= self.lane_buffer < 0.5 * self.lane_width:
            raise ValueError("lane_buffer must lie in [0, lane_width / 2)")


@dataclass
class AffineConstraint:
    """a . U <= b."""

    a: np.ndarray
    b: float
    label: str

    def residual(self, u) -> float:
        return float(self.b - self.a @ np.asarray(u, dtype=float))


# ---------------------------------------------------------------------------
# barrier values and Lie-derivative rows


def barrier_values(x, cp: CBFParams, model: str = DYNAMIC):
    """(h_left, h_right, h_theta_left, h_theta_right) for a state or (n, nx) stack."""
    x = np.asarray(x, dtype=float)
    xi = x[..., KX if model == KINEMATIC else DX]
    th = x[..., KTHETA if model == KINEMATIC else DTHETA]
    half = 0.5 * cp.lane_width
    return np.stack([half - xi, half + xi, cp.theta_max - th, cp.theta_max + th], axis=-1)


def _dynamic_chain(X, p: VehicleParams, c_rate=0.0):
    """Drift and control parts of x_dot, x_ddot and x_dddot for (n, 6) states.

    Returns dict of arrays; G* entries are (n, 2) control coefficients.  The
    control is held constant (its time derivative is zero).  ``c_rate`` is
    the curvature rate dc/dt seen by the vehicle; zero reproduces the model,
    where c is constant.
    """
    x, th, om, v, vp, c = X.T
    if np.any(v < p.v_min_dynamic):
        raise BelowSpeedFloor(f"min v={v.min():.3f} below v_min_dynamic={p.v_min_dynamic}")
    kd, kg, kl = p.yaw_damping, p.yaw_gain, p.lateral_damping
    s, co = np.sin(th), np.cos(th)
    td = om - v * c                      # theta_dot
    xd = v * s + vp * co                 # x_dot
    P = v * co - vp * s                  # d(x_dot)/d(theta)
    vpd = -kl * vp / v                   # v_perp_dot
    w0 = -kd * om / v                    # omega_dot drift
    zeros = np.zeros_like(v)
    F2 = vpd * co + td * P
    G2 = np.column_stack([zeros, s])
    # v_perp_ddot = -kl * vpd / v + kl * vp * a_x / v**2
    # theta_ddot  = omega_dot - a_x * c - v * c_rate
    F3 = -kl * vpd / v * co - 2.0 * vpd * s * td + (w0 - v * c_rate) * P - td**2 * xd
    G3 = np.column_stack([kg * P, kl * vp / v**2 * co + 2.0 * co * td - c * P])
    return dict(xd=xd, F2=F2, G2=G2, F3=F3, G3=G3, td=td, w0=w0, c=c, x=x, th=th)


def lane_rows_batch(X, p: VehicleParams, cp: CBFParams, c_rate=0.0):
    """Lane-barrier rows for (n, 6) dynamic states.

    Returns (a_left, b_left, a_right, b_right) with a_* of shape (n, 2).
    The left condition is  -x''' - 3l x'' - 3l^2 x' + l^3 (L/2 - x) >= 0.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ch = _dynamic_chain(X, p, c_rate)
    lam = cp.lam
    G = ch["G3"] + 3 * lam * ch["G2"]
    F = ch["F3"] + 3 * lam * ch["F2"] + 3 * lam**2 * ch["xd"]
    half = cp.guarded_half_width
    b_left = -F + lam**3 * (half - ch["x"])
    b_right = F + lam**3 * (half + ch["x"])
    return G, b_left, -G, b_right


def heading_rows_batch(X, p: VehicleParams, cp: CBFParams, c_rate=0.0):
    """Heading-barrier rows for (n, 6) dynamic states.

    theta_right:  omega_dot - a_x c + 2 l (omega - v c) + l^2 (theta + theta_max) >= 0
    theta_left:  -omega_dot + a_x c - 2 l (omega - v c) + l^2 (theta_max - theta) >= 0

    A nonzero ``c_rate`` adds its -v * c_rate contribution to theta_ddot.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    x, th, om, v, vp, c = X.T
    if np.any(v < p.v_min_dynamic):
        raise BelowSpeedFloor(f"min v={v.min():.3f} below v_min_dynamic={p.v_min_dynamic}")
    lam = cp.lam
    w0 = -p.yaw_damping * om / v - v * c_rate
    td = om - v * c
    g = np.column_stack([np.full_like(v, p.yaw_gain), -c])   # d(theta_ddot)/dU
    b_right = w0 + 2 * lam * td + lam**2 * (th + cp.theta_max)
    b_left = -w0 - 2 * lam * td + lam**2 * (cp.theta_max - th)
    return g, b_left, -g, b_right


def kinematic_rows_batch(X, p: VehicleParams, cp: CBFParams, delta0: float = 0.0):
    """Fallback rows for (n, 4) kinematic states, all four barriers.

    Lane barriers are 2nd order (x'' + 2l x' + l^2 h), heading barriers 1st
    order.  sin(delta) is linearized at ``delta0``.
    Returns a list of four (a, b) pairs in LABELS order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    x, th, v, c = X.T
    lam, wb = cp.lam, p.wheelbase
    s0, c0 = math.sin(delta0), math.cos(delta0)
    s, co = np.sin(th), np.cos(th)
    t0 = v * (s0 - c0 * delta0) / wb - v * c          # theta_dot drift
    gd = v * c0 / wb                                  # theta_dot per unit delta
    xd = v * s
    F = v * co * t0 + 2 * lam * xd
    G = np.column_stack([v * co * gd, s])
    half = cp.guarded_half_width
    zeros = np.zeros_like(v)
    gh = np.column_stack([gd, zeros])
    return [
        (G, -F + lam**2 * (half - x)),
        (-G, F + lam**2 * (half + x)),
        (gh, -t0 + lam * (cp.theta_max - th)),
        (-gh, t0 + lam * (cp.theta_max + th)),
    ]


def all_rows_batch(X, p: VehicleParams, cp: CBFParams, model: str = DYNAMIC, delta0: float = 0.0,
                   c_rate=0.0):
    """The four barrier rows, LABELS order, as a list of (a (n, 2), b (n,))."""
    if model == KINEMATIC:
        return kinematic_rows_batch(X, p, cp, delta0)
    aL, bL, aR, bR = lane_rows_batch(X, p, cp, c_rate)
    aTL, bTL, aTR, bTR = heading_rows_batch(X, p, cp, c_rate)
    return [(aL, bL), (aR, bR), (aTL, bTL), (aTR, bTR)]


def lane_cbf_rows(state, p: VehicleParams, cp: CBFParams, c_rate: float = 0.0):
    """(left, right) lane-barrier constraints for one dynamic state."""
    aL, bL, aR, bR = lane_rows_batch(np.asarray(state, dtype=float)[None], p, cp, c_rate)
    return AffineConstraint(aL[0], float(bL[0]), "left"), AffineConstraint(aR[0], float(bR[0]), "right")


def heading_cbf_rows(state, p: VehicleParams, cp: CBFParams, c_rate: float = 0.0):
    """(theta_left, theta_right) heading-barrier constraints for one dynamic state."""
    aL, bL, aR, bR = heading_rows_batch(np.asarray(state, dtype=float)[None], p, cp, c_rate)
    return (AffineConstraint(aL[0], float(bL[0]), "theta_left"),
            AffineConstraint(aR[0], float(bR[0]), "theta_right"))


# ---------------------------------------------------------------------------
# chance constraints


def _acklam(p):
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if p > 1 - lo:
        q = math.sqrt(-2 * math.log(1 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)


def norm_ppf(p: float) -> float:
    """Standard normal quantile.

    Rational approximation (relative error ~1e-9) refined by one Halley step
    on the erfc-based CDF.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    x = _acklam(p)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1 + 0.5 * x * u)


@dataclass
class TightenedConstraint:
    """Gaussian chance constraint  a_bar.U + z sqrt(U' S U + sigma_b^2) <= b_bar."""

    label: str
    a_bar: np.ndarray
    b_bar: float
    sigma_a: np.ndarray
    sigma_b: float
    z: float

    @property
    def degenerate(self) -> bool:
        return not (self.sigma_a.any() or self.sigma_b > 0)

    def spread(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return math.sqrt(float(u @ (self.sigma_a**2 * u)) + self.sigma_b**2)

    def margin(self, u) -> float:
        return self.z * self.spread(u)

    def slack(self, u) -> float:
        """b_bar - a_bar.U - margin; non-negative when the chance constraint holds."""
        return float(self.b_bar - self.a_bar @ np.asarray(u, dtype=float) - self.margin(u))

    def linearized(self, u0) -> AffineConstraint:
        """Affine row from linearizing the spread term at u0."""
        if self.degenerate:
            return AffineConstraint(self.a_bar.copy(), self.b_bar, self.label)
        u0 = np.asarray(u0, dtype=float)
        n0 = self.spread(u0)
        if n0 == 0.0:
            # spread is sigma_b only along zero-variance directions; use its value
            return AffineConstraint(self.a_bar.copy(), self.b_bar - self.z * self.sigma_b, self.label)
        grad = self.sigma_a**2 * u0 / n0
        return AffineConstraint(self.a_bar + self.z * grad, self.b_bar - self.z * self.sigma_b**2 / n0,
                                self.label)


def chance_tighten(a_samples, b_samples, eta: float, label: str = "") -> TightenedConstraint:
    """Fit per-component Gaussian statistics to sampled rows and tighten at confidence eta."""
    if not 0.5 < eta < 1.0:
        raise ValueError("eta must lie in (0.5, 1)")
    a = np.atleast_2d(np.asarray(a_samples, dtype=float))
    b = np.asarray(b_samples, dtype=float).ravel()
    n = len(b)
    # shifted by the first sample so identical rows give exactly zero spread
    a_bar = a[0] + (a - a[0]).sum(axis=0) / n
    b_bar = float(b[0] + (b - b[0]).sum() / n)
    sigma_a = np.sqrt(((a - a_bar) ** 2).sum(axis=0) / n)
    sigma_b = float(math.sqrt(((b - b_bar) ** 2).sum() / n))
    tc = TightenedConstraint(label, a_bar, b_bar, sigma_a, sigma_b, norm_ppf(eta))
    if tc.degenerate and n > 1:
        log.debug("degenerate samples for %s; using the nominal constraint", label or "row")
    return tc


# ---------------------------------------------------------------------------
# the QP filter


@dataclass
class FilterResult:
    u_safe: np.ndarray
    slacks: np.ndarray
    h: np.ndarray
    active: list
    deviation: float
    margins: np.ndarray
    constraints: list = field(repr=False, default_factory=list)
    objective: float = float("nan")


def safety_filter(u_ref: GaussianBelief, state_belief: GaussianBelief, p: VehicleParams,
                  cp: CBFParams, model: str = DYNAMIC, c_rate=0.0) -> FilterResult:
    """Minimal-deviation safe control under sampled state and control beliefs.

    Solves  min (U - U_mu)' diag(U_sigma^2)^-1 (U - U_mu) + k_err sum eps_i^2
    subject to the four tightened barrier rows, each relaxed by eps_i >= 0,
    and the actuator box.  The spread term of each chance constraint is
    linearized at the previous iterate (starting from U_mu).  ``c_rate``
    (scalar or one per state sample) is the curvature rate from the track
    preview.
    """
    mu = np.asarray(u_ref.mean, dtype=float)
    sig = np.maximum(np.asarray(u_ref.stddev, dtype=float), cp.sigma_min)
    X = np.atleast_2d(state_belief.samples)
    if model == DYNAMIC and np.any(X[:, DV] < p.v_min_dynamic):
        raise BelowSpeedFloor("state belief below the dynamic-model speed floor")
    umax = np.array([p.delta_max, p.a_x_max])
    u_lin = np.clip(mu, -umax, umax)
    rows = all_rows_batch(X, p, cp, model, delta0=float(u_lin[0]), c_rate=c_rate)
    tight = [chance_tighten(a, b, cp.eta, lab) for (a, b), lab in zip(rows, LABELS)]

    # Work in whitened variables y = [z, e] with U = mu + sig * z and
    # eps = e / sqrt(k_err): the objective becomes |y|^2, which keeps the QP
    # well conditioned however small sigma or large k_err get.
    rk = math.sqrt(cp.k_err)
    H = 2.0 * np.eye(6)
    f = np.zeros(6)
    box_A = np.zeros((4, 6))
    box_A[0, 0], box_A[1, 0], box_A[2, 1], box_A[3, 1] = 1, -1, 1, -1
    box_b = np.concatenate([(umax - mu) / sig, (umax + mu) / sig])[[0, 2, 1, 3]]
    eps_A = np.hstack([np.zeros((4, 2)), -np.eye(4)])

    u = u_lin
    sol = None
    affine = []
    for _ in range(max(1, cp.fixed_point_iters)):
        affine = [t.linearized(u) for t in tight]
        A_c = np.zeros((4, 6))
        b_c = np.empty(4)
        for i, r in enumerate(affine):
            A_c[i, :2] = r.a * sig
            A_c[i, 2 + i] = -1.0 / rk
            b_c[i] = r.b - r.a @ mu
        scale = np.linalg.norm(A_c, axis=1)
        A_c /= scale[:, None]
        b_c /= scale
        A_in = np.vstack([A_c, eps_A, box_A])
        b_in = np.concatenate([b_c, np.zeros(4), box_b])
        z0 = (np.clip(u, -umax, umax) - mu) / sig
        e0 = np.maximum(A_c[:, :2] @ z0 - b_c, 0.0) * rk * scale
        prob = qpsolver.QPProblem(H, f, A_in, b_in)
        sol = qpsolver.solve(prob, method="active_set", x0=np.concatenate([z0, e0]))
        if not sol.ok:
            # heavily infeasible rows make the slack multipliers huge and the
            # working-set choice can cycle; the splitting solver does not care
            sol = qpsolver.solve(prob, method="admm")
        if not sol.ok:
            raise qpsolver.QPFailure(sol.status, "safety filter (slacks should make it feasible)")
        u = mu + sig * sol.u_star[:2]
    u_safe = np.clip(u, -umax, umax)
    eps = np.maximum(sol.u_star[2:], 0.0) / rk
    h = barrier_values(np.asarray(state_belief.mean), cp, model)
    active = [lab for lab, r, e in zip(LABELS, affine, eps)
              if r.residual(u_safe) + e <= 1e-7 * max(1.0, abs(r.b))]
    margins = np.array([t.margin(u_safe) for t in tight])
    return FilterResult(u_safe, eps, h, active, float(np.linalg.norm(u_safe - mu)), margins,
                        affine, sol.objective)


def _predict_samples(X, u, dt, p: VehicleParams, model: str):
    return np.array([integrate(model, x, u, dt, p) for x in X])


@dataclass
class SampledSafetyFilter:
    """The safety filter run under a zero-order hold of length ``dt``.

    The CBF conditions are continuous-time; applying them only at sample
    instants lets the barrier slip by O(dt) while the control is held.  Each
    call therefore evaluates the rows at the state predicted half a hold
    ahead (midpoint rule), re-predicting with the filtered control for
    ``iterations`` passes.  The caller supplies the curvature preview for
    the half hold: ``dc`` is the change of track curvature and ``c_rate``
    the curvature rate at the midpoint.

    Below the dynamic model's speed floor the kinematic variant is used.
    """

    p: VehicleParams
    cp: CBFParams
    dt: float
    iterations: int = 2
    u_prev: np.ndarray | None = None

    def reset(self):
        self.u_prev = None

    def step(self, u_ref: GaussianBelief, state_belief: GaussianBelief, dc=0.0, c_rate=0.0,
             model: str = DYNAMIC) -> FilterResult:
        X = np.atleast_2d(np.asarray(state_belief.samples, dtype=float))
        # the half-hold prediction must stay above the floor even under full braking
        v_low = X[:, DV].min() - 0.5 * self.dt * self.p.a_x_max if model == DYNAMIC else np.inf
        if v_low < self.p.v_min_dynamic or (model == KINEMATIC and X.shape[1] == 6):
            X = np.array([downshift(x) for x in X])
            model = KINEMATIC
        umax = np.array([self.p.delta_max, self.p.a_x_max])
        u = np.clip(u_ref.mean if self.u_prev is None else self.u_prev, -umax, umax)
        c_idx = KC if model == KINEMATIC else DC
        res = None
        for _ in range(max(1, self.iterations)):
            Xm = _predict_samples(X, u, 0.5 * self.dt, self.p, model)
            Xm[:, c_idx] += dc
            res = safety_filter(u_ref, GaussianBelief.from_samples(Xm), self.p, self.cp, model, c_rate)
            u = res.u_safe
        # report barrier values at the current state, not the prediction
        res.h = barrier_values(X.mean(axis=0), self.cp, model)
        self.u_prev = res.u_safe
        return res
