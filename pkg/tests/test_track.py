import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saferace.track import (DuplicatePoints, FoldOver, FrenetPose, GlobalPose, OffTrackTooFar, TooFewPoints,
                            build_track, circle_points, default_circuit, from_frenet, load_track, to_frenet,
                            wrap_angle, write_track_csv)


@pytest.fixture(scope="module")
def circle20():
    return build_track(circle_points(20.0, 256, 2.0), closed=True)


@pytest.fixture(scope="module")
def circuit():
    return build_track(default_circuit(), closed=True)


def test_straight_has_zero_curvature():
    pts = np.column_stack([np.linspace(0, 99, 100), np.zeros(100), np.ones(100)])
    tr = build_track(pts, closed=False)
    assert np.abs(tr.kappa).max() < 1e-12


def test_circle_curvature(circle20):
    assert np.abs(circle20.kappa - 0.05).max() < 1e-3


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        build_track([[0, 0, 1], [1, 0, 1], [2, 0, 1]])


def test_duplicate_points():
    pts = [[0, 0, 1], [1, 0, 1], [1, 0, 1], [2, 0, 1], [3, 0, 1]]
    with pytest.raises(DuplicatePoints):
        build_track(pts, closed=False)


def test_invariants(circuit):
    assert circuit.s_cum[0] == 0.0
    assert np.all(np.diff(circuit.s_cum) > 0)
    assert circuit.total_length > 0
    assert np.all(circuit.widths > 0)


def test_default_circuit_length_and_turning(circuit):
    assert abs(circuit.total_length - 120.0) < 5.0
    ds = np.diff(np.append(circuit.s_cum, circuit.total_length))
    assert abs(abs(np.sum(circuit.kappa * ds)) - 2 * math.pi) < 0.01 * 2 * math.pi


def test_on_centerline_point(circle20):
    i = 37
    pos, nrm, psi = circle20.frame_at(circle20.s_cum[i])
    fr = to_frenet(GlobalPose(pos[0], pos[1], psi), circle20)
    assert fr.s == pytest.approx(circle20.s_cum[i], abs=1e-6)
    assert fr.x_lat == pytest.approx(0.0, abs=1e-9)
    assert fr.theta == pytest.approx(0.0, abs=1e-9)
    assert fr.c == pytest.approx(circle20.kappa[i], abs=1e-9)


def test_left_normal_offset(circuit):
    pos, nrm, psi = circuit.frame_at(10.0)
    p = pos + 0.3 * nrm
    fr = to_frenet(GlobalPose(p[0], p[1], psi), circuit)
    assert fr.x_lat == pytest.approx(0.3, abs=1e-6)
    assert fr.s == pytest.approx(10.0, abs=1e-6)


def test_from_frenet_start(circuit):
    g = from_frenet(FrenetPose(0.0, 0.0, 0.0), circuit)
    assert (g.x, g.y) == pytest.approx(tuple(circuit.xy[0]), abs=1e-9)
    assert g.psi == pytest.approx(circuit.headings[0], abs=1e-9)


def test_circle_offset_geometry(circle20):
    # counter-clockwise circle: the left normal points to the center
    for s in (0.0, 13.0, 77.7):
        g = from_frenet(FrenetPose(s, -1.0, 0.0), circle20)
        r = math.hypot(g.x, g.y)
        # the polyline is inscribed, so its radius sits slightly below 20
        r_center = np.hypot(*circle20.frame_at(s)[0])
        assert r == pytest.approx(r_center + 1.0, abs=1e-6)


def test_fold_over(circle20):
    with pytest.raises(FoldOver):
        from_frenet(FrenetPose(5.0, 25.0, 0.0), circle20)


def test_off_track_too_far(circuit):
    with pytest.raises(OffTrackTooFar):
        to_frenet(GlobalPose(500.0, 500.0, 0.0), circuit)


def test_round_trip_random(circuit):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        s = rng.uniform(0, circuit.total_length)
        fr = FrenetPose(s, rng.uniform(-1.9, 1.9), rng.uniform(-1.0, 1.0))
        back = to_frenet(from_frenet(fr, circuit), circuit)
        ds = (back.s - fr.s + circuit.total_length / 2) % circuit.total_length - circuit.total_length / 2
        worst = max(worst, abs(ds), abs(back.x_lat - fr.x_lat), abs(wrap_angle(back.theta - fr.theta)))
    assert worst < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 119), st.floats(-1.9, 1.9), st.floats(-3.0, 3.0))
def test_round_trip_property(s, x_lat, theta):
    tr = _CIRCUIT
    s = s % tr.total_length
    back = to_frenet(from_frenet(FrenetPose(s, x_lat, theta), tr), tr)
    ds = (back.s - s + tr.total_length / 2) % tr.total_length - tr.total_length / 2
    assert abs(ds) < 1e-6 and abs(back.x_lat - x_lat) < 1e-6
    assert abs(wrap_angle(back.theta - theta)) < 1e-6


_CIRCUIT = build_track(default_circuit(), closed=True)


def test_curvature_interpolation(circuit):
    s = 0.5 * (circuit.s_cum[5] + circuit.s_cum[6])
    assert circuit.curvature_at(s) == pytest.approx(0.5 * (circuit.kappa[5] + circuit.kappa[6]))


def test_curvature_slope_matches_finite_difference(circuit):
    # at a vertex, a one-segment central difference of the interpolated curvature
    for i in (200, 450, 900):
        s = circuit.s_cum[i]
        sm, sp = circuit.s_cum[i - 1], circuit.s_cum[i + 1]
        fwd = (circuit.curvature_at(sp) - circuit.curvature_at(s)) / (sp - s)
        bwd = (circuit.curvature_at(s) - circuit.curvature_at(sm)) / (s - sm)
        assert circuit.curvature_slope_at(s) == pytest.approx(0.5 * (fwd + bwd), abs=1e-9)


def test_csv_round_trip(tmp_path):
    raw = circle_points(10.0, 64, 1.0)
    path = tmp_path / "t.csv"
    write_track_csv(path, raw)
    tr = load_track(path)
    assert abs(tr.total_length - 2 * math.pi * 10) < 0.1


def test_wrap_angle_range():
    a = wrap_angle(np.array([-math.pi, math.pi, 3 * math.pi, 0.1]))
    assert np.all(a > -math.pi) and np.all(a <= math.pi)
    assert a[0] == pytest.approx(math.pi)
