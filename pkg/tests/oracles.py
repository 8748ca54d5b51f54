"""Independent reference computations used by the test-suite.

Nothing here imports the code under test.
"""
import math

import numpy as np
from scipy import integrate, optimize


def random_qp(rng, n=None, m=None, meq=0):
    """Random strictly convex QP with a known strictly feasible point."""
    n = n or int(rng.integers(1, 9))
    m = m if m is not None else int(rng.integers(0, 13))
    M = rng.normal(size=(n, n))
    H = M.T @ M + 0.1 * np.eye(n)
    f = rng.normal(size=n) * 3
    u0 = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = A @ u0 + rng.uniform(0.0, 1.0, size=m)
    Aeq = rng.normal(size=(meq, n))
    beq = Aeq @ u0
    return H, f, A, b, Aeq, beq


def projected_gradient_qp(H, f, A, b, Aeq=None, beq=None, tol=1e-10, max_iter=2_000_000):
    """Accelerated projected gradient on the Lagrange dual.

    The dual of a strictly convex QP is a bound-constrained concave QP in the
    multipliers (lambda >= 0 for inequalities, free for equalities), whose
    projection is a simple clip.  Returns (u, objective).
    """
    n = H.shape[0]
    Aeq = np.zeros((0, n)) if Aeq is None else Aeq
    beq = np.zeros(0) if beq is None else beq
    G = np.vstack([A, Aeq])
    h = np.concatenate([b, beq])
    m = A.shape[0]
    Hinv = np.linalg.inv(H)
    if G.shape[0] == 0:
        u = -Hinv @ f
        return u, float(0.5 * u @ H @ u + f @ u)
    Q = G @ Hinv @ G.T
    q = G @ Hinv @ f + h
    L = max(np.linalg.eigvalsh(Q)[-1], 1e-12)
    y = np.zeros(G.shape[0])
    z = y.copy()
    t = 1.0
    for k in range(max_iter):
        grad = Q @ z + q
        y_new = z - grad / L
        y_new[:m] = np.maximum(y_new[:m], 0.0)
        # gradient-mapping norm as stopping criterion
        if np.abs(y_new - z).max() * L < tol and k > 10:
            y = y_new
            break
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        if (y_new - y) @ (z - y_new) > 0:  # adaptive restart
            t_new = 1.0
            z = y_new.copy()
        else:
            z = y_new + (t - 1) / t_new * (y_new - y)
        y, t = y_new, t_new
    u = -Hinv @ (f + G.T @ y)
    return u, float(0.5 * u @ H @ u + f @ u)


def normal_quantile_by_quadrature(p):
    """Standard normal quantile by root-finding on the integrated density."""
    pdf = lambda x: math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)

    def cdf(x):
        val, _ = integrate.quad(pdf, 0.0, x, epsabs=1e-14, epsrel=1e-14)
        return 0.5 + val

    return optimize.brentq(lambda x: cdf(x) - p, -10, 10, xtol=1e-14)


def menger_curvature(pts, closed=True):
    """Three-point curvature of a polyline (1/R of the circumscribed circle)."""
    p = np.asarray(pts, float)
    prev = np.roll(p, 1, axis=0)
    nxt = np.roll(p, -1, axis=0)
    a = np.linalg.norm(p - prev, axis=1)
    b = np.linalg.norm(nxt - p, axis=1)
    c = np.linalg.norm(nxt - prev, axis=1)
    cross = (p[:, 0] - prev[:, 0]) * (nxt[:, 1] - p[:, 1]) - (p[:, 1] - prev[:, 1]) * (nxt[:, 0] - p[:, 0])
    k = 2 * cross / (a * b * c)
    if not closed:
        k[0], k[-1] = k[1], k[-2]
    return k


def greatest_feasible_speeds(kappa, ds, a_lat, a_acc, a_brk, v_max, closed=True, seed=0, tol=1e-9):
    """Pointwise-largest speed profile satisfying the pairwise accel/brake limits.

    Starts from the lateral cap and lowers any speed that violates a pairwise
    constraint with a neighbour, visiting links in random order until nothing
    changes.  The feasible set is closed under pointwise max, so the limit is
    its greatest element regardless of visiting order.
    """
    rng = np.random.default_rng(seed)
    kappa = np.asarray(kappa, float)
    n = len(kappa)
    with np.errstate(divide="ignore"):
        v = np.where(np.abs(kappa) > 0, np.sqrt(a_lat / np.abs(kappa)), np.inf)
    v = np.maximum(np.minimum(v, v_max), 0.1)

    def avail(lim, vi, ki):
        r = vi * vi * abs(ki) / a_lat
        return lim * math.sqrt(max(0.0, 1.0 - r * r))

    links = n if closed else n - 1
    while True:
        changed = 0.0
        for i in rng.permutation(links):
            j = (i + 1) % n
            hi = math.sqrt(v[i] ** 2 + 2 * avail(a_acc, v[i], kappa[i]) * ds[i])
            if v[j] > hi:
                changed = max(changed, v[j] - hi)
                v[j] = hi
            hi = math.sqrt(v[j] ** 2 + 2 * avail(a_brk, v[j], kappa[j]) * ds[i])
            if v[i] > hi:
                changed = max(changed, v[i] - hi)
                v[i] = hi
        if changed < tol:
            return v


def constant_offset_curvature_cost(radius, offsets, n=720):
    """Sum of squared curvature times arc length of concentric circle polylines.

    ``offsets`` move the path toward the center (radius - offset), matching a
    left-positive offset on a counter-clockwise circle.
    """
    out = []
    for a in offsets:
        r = radius - a
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
        k = menger_curvature(pts)
        seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        out.append(float(np.sum(k**2 * seg)))
    return np.array(out)


def time_derivatives_by_fd(rhs, x0, g, h=2e-3):
    """(g, g', g'', g''') along the flow of x' = rhs(x) through x0.

    The trajectory is integrated both ways from x0 with a tight-tolerance
    Runge-Kutta; derivatives come from five-point central stencils,
    Richardson-extrapolated between steps h and h/2.
    """
    from scipy.integrate import solve_ivp

    def at(t):
        if t == 0.0:
            return g(np.asarray(x0, float))
        sol = solve_ivp(lambda _, x: rhs(x), (0.0, t), np.asarray(x0, float), method="DOP853",
                        rtol=1e-13, atol=1e-13)
        return g(sol.y[:, -1])

    def stencil(k):
        v = {j: at(j * k) for j in (-2, -1, 0, 1, 2)}
        d1 = (v[-2] - 8 * v[-1] + 8 * v[1] - v[2]) / (12 * k)
        d2 = (-v[-2] + 16 * v[-1] - 30 * v[0] + 16 * v[1] - v[2]) / (12 * k * k)
        d3 = (v[2] - 2 * v[1] + 2 * v[-1] - v[-2]) / (2 * k**3)
        return np.array([v[0], d1, d2, d3])

    coarse, fine = stencil(h), stencil(h / 2)
    out = fine.copy()
    # d1 and d2 stencils are 4th order, d3 is 2nd order
    out[1:3] = (16 * fine[1:3] - coarse[1:3]) / 15
    out[3] = (4 * fine[3] - coarse[3]) / 3
    return out


def rays_by_dense_march(origin, bearings, centerline, half_width, r_max, closed=True, n=10_000):
    """First lane exit along each bearing, by dense sampling plus bisection.

    A point is in the lane while its distance to the centerline polyline is
    below ``half_width``.  Returns r_max for rays that never leave.
    """
    from scipy.spatial import cKDTree

    c = np.asarray(centerline, float)
    seg_a = c if closed else c[:-1]
    seg_b = np.roll(c, -1, axis=0) if closed else c[1:]
    tree = cKDTree(c)

    def outside(pts):
        _, i = tree.query(pts)
        best = np.full(len(pts), np.inf)
        # nearest vertex plus its two neighbouring segments
        for j in (i - 1, i):
            j = j % len(seg_a)
            a, b = seg_a[j], seg_b[j]
            ab = b - a
            t = np.clip(np.einsum("ij,ij->i", pts - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
            best = np.minimum(best, np.linalg.norm(pts - (a + t[:, None] * ab), axis=1))
        return best >= half_width

    o = np.asarray(origin, float)
    r = np.linspace(0.0, r_max, n + 1)[1:]
    out = []
    for ang in bearings:
        d = np.array([math.cos(ang), math.sin(ang)])
        hit = outside(o + r[:, None] * d)
        if not hit.any():
            out.append(r_max)
            continue
        k = int(np.argmax(hit))
        lo, hi = (r[k - 1] if k else 0.0), r[k]
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if outside((o + mid * d)[None])[0]:
                hi = mid
            else:
                lo = mid
        out.append(0.5 * (lo + hi))
    return np.array(out)
