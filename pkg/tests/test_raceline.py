import numpy as np
import pytest

from saferace.raceline import (Infeasible, VelocityLimits, build_trajectory, centerline_reference,
                               compute_raceline, min_curvature_line, read_raceline_csv, sum_sq_curvature,
                               velocity_profile, write_raceline_csv)
from saferace.track import build_track, circle_points, default_circuit

from oracles import constant_offset_curvature_cost, greatest_feasible_speeds


@pytest.fixture(scope="module")
def circle():
    return build_track(circle_points(20.0, 256, 2.0), closed=True)


@pytest.fixture(scope="module")
def circuit():
    return build_track(default_circuit(), closed=True)


def test_straight_gives_zero_offsets():
    pts = np.column_stack([np.linspace(0, 60, 61), np.zeros(61), np.full(61, 2.0)])
    tr = build_track(pts, closed=False)
    alpha = min_curvature_line(tr, 0.5)
    assert np.abs(alpha).max() < 1e-6


def test_circle_matches_constant_offset_brute_force(circle):
    alpha = min_curvature_line(circle, 0.5)
    cand = np.linspace(-1.75, 1.75, 351)
    best = cand[np.argmin(constant_offset_curvature_cost(20.0, cand))]
    assert best == pytest.approx(-1.75)
    assert np.abs(alpha - best).max() < 1e-3


def test_infeasible_vehicle_width(circle):
    with pytest.raises(Infeasible):
        min_curvature_line(circle, 5.0)


@pytest.mark.parametrize("name", ["circle", "circuit", "small"])
def test_raceline_not_curvier_than_centerline(name, circle, circuit):
    tr = {"circle": circle, "circuit": circuit,
          "small": build_track(default_circuit(0.8, 0.2), closed=True)}[name]
    w = {"circle": 0.5, "circuit": 1.8, "small": 0.3}[name]
    alpha = min_curvature_line(tr, w)
    assert np.all(np.abs(alpha) <= tr.widths - w / 2 + 1e-12)
    assert sum_sq_curvature(tr, alpha) <= sum_sq_curvature(tr, np.zeros(tr.n))


def test_single_offset_perturbation_does_not_improve(circuit):
    from saferace.raceline import curvature_qp
    from saferace import qpsolver
    qp = curvature_qp(circuit, 1.8)
    a = qpsolver.solve(qp.problem()).u_star
    base = qp.objective(a)
    rng = np.random.default_rng(0)
    for i in rng.choice(len(a), 40, replace=False):
        for d in (-0.01, 0.01):
            b = a.copy()
            b[i] = np.clip(b[i] + d, -qp.bound[i], qp.bound[i])
            assert qp.objective(b) >= base - 1e-9 * max(1.0, base)


def test_constant_curvature_speed():
    lim = VelocityLimits(a_lat_max=5.0, v_max=100.0)
    v, a = velocity_profile(np.full(100, 0.05), np.full(100, 0.5), lim, closed=True)
    assert np.allclose(v, 10.0, atol=1e-9)
    assert np.allclose(a, 0.0, atol=1e-9)


def test_straight_cruise():
    lim = VelocityLimits(v_max=30.0)
    v, a = velocity_profile(np.zeros(400), np.full(400, 1.0), lim, closed=True)
    assert np.allclose(v, 30.0)
    assert np.allclose(a, 0.0)


def _hairpin(n=180):
    # two straights joined by tight turns: a stadium with R = 4 m ends
    k = np.zeros(n)
    k[40:70] = 0.25
    k[110:140] = 0.25
    return k, np.full(n, 0.5)


def test_hairpin_pairwise_feasibility():
    lim = VelocityLimits(a_lat_max=6.0, a_lon_accel_max=3.0, a_lon_brake_max=5.0, v_max=14.0)
    k, ds = _hairpin()
    v, a = velocity_profile(k, ds, lim, closed=True, tol=1e-10)
    n = len(k)
    for i in range(n):
        j = (i + 1) % n
        acc = lim.a_lon_accel_max * np.sqrt(max(0, 1 - (v[i] ** 2 * k[i] / lim.a_lat_max) ** 2))
        brk = lim.a_lon_brake_max * np.sqrt(max(0, 1 - (v[j] ** 2 * k[j] / lim.a_lat_max) ** 2))
        assert v[j] ** 2 <= v[i] ** 2 + 2 * acc * ds[i] + 1e-9
        assert v[i] ** 2 <= v[j] ** 2 + 2 * brk * ds[i] + 1e-9
    assert np.all(v**2 * np.abs(k) <= lim.a_lat_max + 1e-6)
    assert np.all(v > 0)


def test_profile_is_pointwise_maximum():
    lim = VelocityLimits(a_lat_max=6.0, a_lon_accel_max=3.0, a_lon_brake_max=5.0, v_max=14.0)
    k, ds = _hairpin()
    v, _ = velocity_profile(k, ds, lim, closed=True, tol=1e-12, max_sweeps=500)
    ref = greatest_feasible_speeds(k, ds, 6.0, 3.0, 5.0, 14.0, closed=True)
    assert np.abs(v - ref).max() < 1e-6


def test_trajectory_invariants(circuit):
    lim = VelocityLimits()
    traj = compute_raceline(circuit, 1.8, lim)
    assert np.all(traj.v_x > 0)
    assert np.all(traj.v_x**2 * np.abs(traj.kappa) <= lim.a_lat_max + 1e-6)
    assert np.all(traj.a_x <= lim.a_lon_accel_max + 1e-6)
    assert np.all(traj.a_x >= -lim.a_lon_brake_max - 1e-6)
    assert np.all(np.abs(traj.alpha) <= circuit.widths - 0.9 + 1e-12)


def test_centerline_reference_has_zero_offset(circuit):
    traj = centerline_reference(circuit, VelocityLimits())
    assert np.all(traj.alpha == 0)
    assert np.abs(traj.theta).max() < 1e-9


def test_csv_export(tmp_path, circle):
    traj = build_trajectory(circle, np.zeros(circle.n), VelocityLimits())
    path = tmp_path / "rl.csv"
    write_raceline_csv(path, traj)
    back = read_raceline_csv(path)
    assert list(back) == ["s", "x", "y", "alpha", "psi", "kappa", "v_x", "a_x"]
    assert np.allclose(back["v_x"], traj.v_x, rtol=1e-8)
