"""Dense convex QP solver.

Solves

    min  1/2 u^T H u + f^T u
    s.t. A_in u <= b_in
         A_eq u  = b_eq

with a primal active-set method for small problems and an ADMM splitting
(OSQP-style, followed by an active-set polish) for large ones.  Every
returned solution carries a KKT residual.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

ACTIVE_SET_MAX_N = 200


class QPStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


class QPFailure(RuntimeError):
    """Raised by callers that need an optimal solution and did not get one."""

    def __init__(self, status, message=""):
        super().__init__(f"QP {status.value}: {message}" if message else f"QP {status.value}")
        self.status = status


@dataclass
class QPProblem:
    H: np.ndarray
    f: np.ndarray
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.atleast_1d(np.asarray(self.f, dtype=float)).ravel()
        n = self.f.size
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if not np.allclose(self.H, self.H.T, atol=1e-9, rtol=0.0):
            raise ValueError("H is not symmetric")
        self.A_in, self.b_in = _rows(self.A_in, self.b_in, n, "in")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "eq")

    @property
    def n(self) -> int:
        return self.f.size

    def objective(self, u) -> float:
        return float(0.5 * u @ self.H @ u + self.f @ u)


def _rows(A, b, n, name):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if A.shape[1] != n or A.shape[0] != b.size:
        raise ValueError(f"A_{name} {A.shape} and b_{name} {b.shape} inconsistent with n={n}")
    return A, b


@dataclass
class QPSolution:
    u_star: np.ndarray
    duals_in: np.ndarray
    duals_eq: np.ndarray
    status: QPStatus
    kkt_residual: float
    iterations: int = 0
    objective: float = float("nan")
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def ok(self) -> bool:
        return self.status is QPStatus.OPTIMAL


def kkt_residual(p: QPProblem, u, lam, nu) -> float:
    """Scaled infinity-norm KKT residual.

    Each block is divided by the magnitude of the terms it balances, so the
    value is comparable across problems with very different weightings.
    """
    Hu = p.H @ u
    grad = Hu + p.f + p.A_in.T @ lam + p.A_eq.T @ nu
    scale = max(1.0, np.abs(Hu).max(initial=0.0), np.abs(p.f).max(initial=0.0),
                np.abs(p.A_in.T @ lam).max(initial=0.0))
    r = np.abs(grad).max(initial=0.0) / scale
    if p.b_in.size:
        Au = p.A_in @ u
        bscale = 1.0 + np.maximum(np.abs(p.b_in), np.abs(Au))
        r = max(r, (np.maximum(Au - p.b_in, 0.0) / bscale).max())
        r = max(r, np.maximum(-lam, 0.0).max() / scale)
        r = max(r, (np.abs(lam * (p.b_in - Au)) / (scale * bscale)).max())
    if p.b_eq.size:
        Au = p.A_eq @ u
        r = max(r, (np.abs(Au - p.b_eq) / (1.0 + np.abs(p.b_eq))).max())
    return float(r)


def solve(p: QPProblem, tol: float = 1e-9, max_iter: int = 1000, method: str = "auto",
          x0=None) -> QPSolution:
    """Solve a convex QP.

    ``method`` is ``"active_set"``, ``"admm"`` or ``"auto"`` (active set up to
    ``ACTIVE_SET_MAX_N`` variables).  ``x0`` is an optional warm start; it is
    used directly by the active-set method when feasible.
    """
    if method == "auto":
        method = "active_set" if p.n <= ACTIVE_SET_MAX_N else "admm"
    H = _regularized(p.H)
    if method == "active_set":
        return _active_set(p, H, tol, max_iter, x0)
    if method == "admm":
        return _admm(p, H, tol, max_iter=max(max_iter, 20000))
    raise ValueError(f"unknown method {method!r}")


def _regularized(H):
    # Semidefinite H gets a tiny ridge so every KKT system is nonsingular.
    n = H.shape[0]
    if n == 0:
        return H
    w = np.linalg.eigvalsh(H)
    if w[0] <= 1e-10 * max(1.0, w[-1]):
        return H + 1e-9 * np.eye(n)
    return H


def _finish(p, u, lam, nu, status, it, active=None):
    res = kkt_residual(p, u, lam, nu)
    if status is QPStatus.OPTIMAL and res > 1e-6:
        status = QPStatus.MAX_ITER
    return QPSolution(u, lam, nu, status, res, it, p.objective(u),
                      np.asarray(sorted(active) if active is not None else [], dtype=int))


def _infeasible(p, it=0):
    return QPSolution(np.full(p.n, np.nan), np.zeros(p.b_in.size), np.zeros(p.b_eq.size),
                      QPStatus.INFEASIBLE, float("inf"), it)


def phase_one(p: QPProblem, tol: float = 1e-9):
    """Find a feasible point by the slack LP  min t  s.t.  A_in u - t <= b_in, A_eq u = b_eq.

    Returns None when the minimal slack is positive (problem infeasible).
    """
    n, m = p.n, p.b_in.size
    if m == 0 and p.b_eq.size == 0:
        return np.zeros(n)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([p.A_in, -np.ones((m, 1))]) if m else None
    b_ub = p.b_in if m else None
    A_eq = np.hstack([p.A_eq, np.zeros((p.b_eq.size, 1))]) if p.b_eq.size else None
    b_eq = p.b_eq if p.b_eq.size else None
    bounds = [(None, None)] * n + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    scale = 1.0 + np.abs(p.b_in).max(initial=0.0) + np.abs(p.b_eq).max(initial=0.0)
    if res.x[-1] > 1e-7 * scale:
        return None
    return res.x[:n]


def _is_feasible(p, u, tol):
    ok = True
    if p.b_in.size:
        ok &= bool(np.all(p.A_in @ u <= p.b_in + tol * (1.0 + np.abs(p.b_in))))
    if p.b_eq.size:
        ok &= bool(np.allclose(p.A_eq @ u, p.b_eq, atol=tol * 10, rtol=0.0))
    return ok


def _eqp_step(H, g, Aw):
    """Null-space solve of the equality-constrained step.

    Returns (step, multipliers) for  min 1/2 d'Hd + g'd  s.t.  Aw d = 0.
    A full-rank working set gives an exactly zero step.
    """
    n, k = H.shape[0], Aw.shape[0]
    if k == 0:
        return -np.linalg.solve(H, g), np.zeros(0)
    Q, R = np.linalg.qr(Aw.T, mode="complete")
    Y, Z, R1 = Q[:, :k], Q[:, k:], R[:k]
    if Z.shape[1]:
        step = -Z @ np.linalg.solve(Z.T @ H @ Z, Z.T @ g)
    else:
        step = np.zeros(n)
    # Aw' mult = -(g + H step)
    mult = scipy.linalg.solve_triangular(R1, -(Y.T @ (g + H @ step)))
    return step, mult


def _active_set(p: QPProblem, H, tol, max_iter, x0) -> QPSolution:
    n, m, meq = p.n, p.b_in.size, p.b_eq.size
    if m == 0 and meq == 0:
        u = -np.linalg.solve(H, p.f)
        return _finish(p, u, np.zeros(0), np.zeros(0), QPStatus.OPTIMAL, 1)

    u = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if _is_feasible(p, x0, 1e-9):
            u = x0.copy()
    if u is None:
        u = phase_one(p, tol)
        if u is None:
            return _infeasible(p)

    # Initial working set: active inequalities that keep the rows independent.
    work: list[int] = []
    if m:
        slack = p.b_in - p.A_in @ u
        cand = np.flatnonzero(slack <= 1e-9 * (1.0 + np.abs(p.b_in)))
        rows = p.A_eq.copy()
        rank = np.linalg.matrix_rank(rows) if meq else 0
        for i in cand:
            trial = np.vstack([rows, p.A_in[i]])
            r = np.linalg.matrix_rank(trial)
            if r > rank:
                rows, rank = trial, r
                work.append(int(i))
            if rank >= n:
                break

    lam_w = np.zeros(0)
    nu = np.zeros(meq)
    for it in range(1, max_iter + 1):
        Aw = np.vstack([p.A_eq, p.A_in[work]]) if work else p.A_eq
        step, mult = _eqp_step(H, H @ u + p.f, Aw)
        nu = mult[:meq]
        lam_w = mult[meq:]
        if np.abs(step).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(u).max(initial=0.0)):
            if lam_w.size == 0 or lam_w.min() >= -tol * max(1.0, np.abs(lam_w).max()):
                lam = np.zeros(m)
                lam[work] = np.maximum(lam_w, 0.0)
                return _finish(p, u, lam, nu, QPStatus.OPTIMAL, it, work)
            work.pop(int(np.argmin(lam_w)))
            continue
        alpha, block = 1.0, None
        if m:
            outside = np.ones(m, dtype=bool)
            outside[work] = False
            Ap = p.A_in @ step
            mask = outside & (Ap > 1e-14 * (1.0 + np.abs(step).max()))
            if mask.any():
                idx = np.flatnonzero(mask)
                ratios = (p.b_in[idx] - p.A_in[idx] @ u) / Ap[idx]
                ratios = np.maximum(ratios, 0.0)
                j = int(np.argmin(ratios))
                if ratios[j] < 1.0:
                    alpha, block = ratios[j], int(idx[j])
        u = u + alpha * step
        if block is not None:
            work.append(block)

    lam = np.zeros(m)
    if work:
        lam[work] = np.maximum(lam_w[: len(work)], 0.0) if lam_w.size == len(work) else 0.0
    return _finish(p, u, lam, nu, QPStatus.MAX_ITER, max_iter, work)


def _admm(p: QPProblem, H, tol, max_iter, rho=0.1, sigma=1e-6, alpha=1.6, eps=1e-9):
    n, m, meq = p.n, p.b_in.size, p.b_eq.size
    C = np.vstack([p.A_eq, p.A_in])
    lo = np.concatenate([p.b_eq, np.full(m, -np.inf)])
    hi = np.concatenate([p.b_eq, p.b_in])
    nc = C.shape[0]
    # Equality rows get a stiffer penalty, as in OSQP.
    rho_vec = np.full(nc, rho)
    rho_vec[:meq] *= 1e3
    fac = scipy.linalg.cho_factor(H + sigma * np.eye(n) + C.T @ (rho_vec[:, None] * C))
    x = np.zeros(n)
    z = np.zeros(nc)
    y = np.zeros(nc)
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x - p.f + C.T @ (rho_vec * z - y)
        xt = scipy.linalg.cho_solve(fac, rhs)
        zt = C @ xt
        x = alpha * xt + (1 - alpha) * x
        z_prev = z
        zr = alpha * zt + (1 - alpha) * z_prev
        z = np.clip(zr + y / rho_vec, lo, hi)
        y = y + rho_vec * (zr - z)
        if it % 25 == 0:
            Cx = C @ x
            r_prim = np.abs(Cx - z).max(initial=0.0)
            r_dual = np.abs(H @ x + p.f + C.T @ y).max(initial=0.0)
            sp = eps * (1 + max(np.abs(Cx).max(initial=0.0), np.abs(z).max(initial=0.0)))
            sd = eps * (1 + max(np.abs(H @ x).max(initial=0.0), np.abs(p.f).max(initial=0.0)))
            if r_prim <= sp and r_dual <= sd:
                break
    # Polish on the identified active set; fall back to the exact active-set method.
    nu = y[:meq]
    lam_guess = y[meq:]
    active = np.flatnonzero(lam_guess > 1e-7 * max(1.0, np.abs(lam_guess).max(initial=0.0)))
    polished = _polish(p, H, active)
    if polished is not None:
        u, lam, nu = polished
        if _is_feasible(p, u, 1e-9) and lam.min(initial=0.0) >= -1e-9:
            sol = _finish(p, u, np.maximum(lam, 0.0), nu, QPStatus.OPTIMAL, it, active)
            if sol.ok:
                return sol
    start = x if _is_feasible(p, x, 1e-9) else None
    sol = _active_set(p, H, tol, 5000, start)
    sol.iterations += it
    return sol


def _polish(p, H, active):
    n, meq = p.n, p.b_eq.size
    Aw = np.vstack([p.A_eq, p.A_in[active]])
    k = Aw.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = Aw.T
    K[n:, :n] = Aw
    rhs = np.concatenate([-p.f, p.b_eq, p.b_in[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    u = sol[:n]
    lam = np.zeros(p.b_in.size)
    lam[active] = sol[n + meq:]
    return u, lam, sol[n:n + meq]
