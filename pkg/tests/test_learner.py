import math

import numpy as np
import pytest

from oracles import rays_by_dense_march
from saferace import learner as lrn
from saferace.belief import GaussianBelief
from saferace.harness import ExperimentConfig, prepare, run_iteration
from saferace.track import FrenetPose, GlobalPose, build_track, default_circuit, from_frenet

LP = lrn.LearnerParams()


@pytest.fixture(scope="module")
def circuit():
    return build_track(default_circuit(), closed=True)


@pytest.fixture(scope="module")
def straight():
    pts = np.column_stack([np.linspace(0, 199, 200), np.zeros(200), np.full(200, 2.0)])
    return build_track(pts, closed=False)


def test_symmetric_fan_mid_lane(straight):
    obs = lrn.observe(GlobalPose(100.0, 0.0, 0.0), (8.0, 0.0, 0.0), straight, 21, 15.0)
    assert np.abs(obs.rays - obs.rays[::-1]).max() < 1e-6


def test_leftmost_ray_at_left_boundary(straight):
    # the leftmost bearing (+100 deg) points back across the boundary the car sits on
    obs = lrn.observe(GlobalPose(100.0, 2.0 - 1e-9, 0.0), (8.0, 0.0, 0.0), straight, 21, 15.0)
    assert obs.rays[-1] < 1e-6


def test_rays_capped_and_positive(circuit):
    obs = lrn.observe(from_frenet(FrenetPose(3.0, 0.0, 0.0), circuit), (8.0, 0.0, 0.0), circuit, 21, 15.0)
    assert np.all(obs.rays > 0) and np.all(obs.rays <= 15.0)


def test_rays_match_dense_march(circuit):
    rng = np.random.default_rng(4)
    half = float(circuit.widths[0])
    worst = 0.0
    for _ in range(100):
        fr = FrenetPose(rng.uniform(0, circuit.total_length), rng.uniform(-0.9, 0.9) * half,
                        rng.uniform(-0.5, 0.5))
        pose = from_frenet(fr, circuit)
        obs = lrn.observe(pose, (8.0, 0.0, 0.0), circuit, 21, 15.0)
        ref = rays_by_dense_march([pose.x, pose.y], pose.psi + lrn.fan_bearings(21), circuit.xy, half, 15.0)
        worst = max(worst, np.abs(obs.rays - ref).max())
    assert worst < 1e-3


def test_ray_noise_needs_and_uses_rng(straight):
    pose = GlobalPose(100.0, 0.0, 0.0)
    a = lrn.observe(pose, (8.0, 0.0, 0.0), straight, 21, 15.0, noise=0.1, rng=np.random.default_rng(1))
    b = lrn.observe(pose, (8.0, 0.0, 0.0), straight, 21, 15.0, noise=0.1, rng=np.random.default_rng(1))
    assert np.array_equal(a.rays, b.rays)
    assert not np.array_equal(a.rays, lrn.observe(pose, (8.0, 0.0, 0.0), straight, 21, 15.0).rays)


def _linear_data(rng, n=400, d=6):
    X = rng.uniform(-1, 1, size=(n, d))
    return X, 2.0 * X[:, 0]


def test_synthetic_linear_regression():
    rng = np.random.default_rng(0)
    X, y = _linear_data(rng)
    ens = lrn.fit_ensemble(X, y, lrn.LearnerParams(ridge=1e-6), seed=3)
    Xt, yt = _linear_data(rng, 200)
    pred = ens.member_predictions(Xt).mean(axis=0)[:, 0]
    assert np.abs(pred - yt).max() < 1e-3


def test_too_few_records():
    with pytest.raises(lrn.TooFewRecords):
        lrn.fit(lrn.Dataset(21), LP, seed=0)
    X, y = _linear_data(np.random.default_rng(0), n=lrn.MIN_RECORDS - 1)
    with pytest.raises(lrn.TooFewRecords):
        lrn.fit_ensemble(X, y, LP, seed=0)


def test_duplicated_data_matches_doubled_ridge():
    # without bootstrap, every record twice with twice the ridge is the same normal equation
    X, y = _linear_data(np.random.default_rng(1), n=120)
    lp = lrn.LearnerParams(bootstrap=False, n_members=3, width=64)
    one = lrn.fit_ensemble(X, y, lp, seed=5)
    two = lrn.fit_ensemble(np.vstack([X, X]), np.concatenate([y, y]),
                           lrn.LearnerParams(bootstrap=False, n_members=3, width=64, ridge=2 * lp.ridge), seed=5)
    assert np.array_equal(one.W, two.W) and np.array_equal(one.b, two.b)
    assert np.allclose(one.beta, two.beta, rtol=1e-8, atol=1e-10)


def test_shared_seed_gives_zero_spread():
    X, y = _linear_data(np.random.default_rng(2))
    ens = lrn.fit_ensemble(X, y, LP, seed=9, shared_seed=True)
    bel = ens.belief(X[0])
    assert np.all(bel.stddev == 0.0)


def test_belief_is_member_statistics():
    X, y = _linear_data(np.random.default_rng(3))
    ens = lrn.fit_ensemble(np.c_[X, X[:, :1] ** 2], np.c_[y, X[:, 1]], LP, seed=4)
    x = np.r_[X[7], X[7, 0] ** 2]
    bel = ens.belief(x)
    members = np.array([ens.member_predictions(x[None])[i, 0] for i in range(ens.n_members)])
    assert np.array_equal(bel.samples, members)
    mu = members.mean(axis=0)
    assert np.allclose(bel.mean, mu, rtol=0, atol=1e-12)
    assert np.allclose(bel.stddev, np.sqrt(((members - mu) ** 2).mean(axis=0)), rtol=0, atol=1e-12)


def test_deterministic_fit():
    X, y = _linear_data(np.random.default_rng(5))
    a = lrn.fit_ensemble(X, y, LP, seed=1)
    b = lrn.fit_ensemble(X, y, LP, seed=1)
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.W, b.W)


def _lane_dataset(track, rng, n, x_span, th_span, lp=LP):
    obs, labels, states = [], [], []
    for _ in range(n):
        s = rng.uniform(0, track.total_length)
        x, th = rng.uniform(-x_span, x_span), rng.uniform(-th_span, th_span)
        o = lrn.observe(from_frenet(FrenetPose(s, x, th), track), (8.0, 0.0, 0.0), track, lp.n_rays, lp.r_max)
        obs.append(o)
        labels.append([-0.3 * x - 0.5 * th, 8.0])
        states.append([x, th, track.curvature_at(s)])
    return obs, labels, states


def test_out_of_distribution_spread(circuit):
    rng = np.random.default_rng(6)
    obs, labels, states = _lane_dataset(circuit, rng, 600, 0.3, 0.05)
    data = lrn.aggregate(lrn.Dataset(LP.n_rays), obs, labels, states, 0)
    m_com, _ = lrn.fit(data, LP, seed=11)
    ind, _, _ = _lane_dataset(circuit, rng, 100, 0.3, 0.05)
    ood = []
    for _ in range(100):
        fr = FrenetPose(rng.uniform(0, circuit.total_length), rng.choice([-1, 1]) * rng.uniform(1.2, 1.8),
                        rng.choice([-1, 1]) * rng.uniform(0.4, 0.8))
        ood.append(lrn.observe(from_frenet(fr, circuit), (8.0, 0.0, 0.0), circuit, LP.n_rays, LP.r_max))
    spread = lambda o: float(np.linalg.norm(lrn.predict_control(m_com, o).stddev))
    median_in = np.median([spread(o) for o in ind])
    frac = np.mean([spread(o) > median_in for o in ood])
    assert frac >= 0.8, frac


@pytest.fixture(scope="module")
def expert_lap():
    cfg = ExperimentConfig(n_iterations=1)
    setup = prepare(cfg)
    return cfg, run_iteration(setup, cfg, None, 0, False, seed=0)


def test_state_network_held_out_on_expert_lap(expert_lap):
    cfg, res = expert_lap
    n = len(res.observations)
    train = np.arange(n) % 2 == 0
    pick = lambda seq, m: [v for v, k in zip(seq, m) if k]
    data = lrn.aggregate(lrn.Dataset(cfg.learner.n_rays), pick(res.observations, train), pick(res.labels, train),
                         pick(res.states, train), 0)
    _, m_st = lrn.fit(data, cfg.learner, seed=0)
    err = [abs(lrn.predict_state(m_st, o).mean[0] - s[0])
           for o, s in zip(pick(res.observations, ~train), pick(res.states, ~train))]
    assert np.mean(err) < 0.1


def test_state_samples_pass_speeds_through():
    bel = GaussianBelief.from_samples([[0.1, 0.02, 0.01], [0.2, 0.03, 0.02]])
    X = lrn.state_samples(bel, 7.25, -0.125, 0.375)
    assert np.all(X[:, 3] == 7.25) and np.all(X[:, 4] == -0.125) and np.all(X[:, 2] == 0.375)
    assert np.array_equal(X[:, [0, 1, 5]], bel.samples)


def _records(n, rng, k=21):
    return rng.uniform(0, 1, size=(n, k + 3)), rng.uniform(size=(n, 2)), rng.uniform(size=(n, 3))


def test_aggregate_counts_and_partition():
    rng = np.random.default_rng(8)
    d = lrn.Dataset(21)
    d1 = lrn.aggregate(d, *_records(30, rng), 0)
    d2 = lrn.aggregate(d1, *_records(20, rng), 1)
    assert len(d1) == 30 and len(d2) == 50
    assert np.array_equal(d2.features[:30], d1.features)
    assert len(d2.iteration(0)) == 30 and len(d2.iteration(1)) == 20


def test_aggregate_missing_label():
    rng = np.random.default_rng(9)
    f, l, s = _records(5, rng)
    l[2, 0] = np.nan
    with pytest.raises(lrn.MissingLabels):
        lrn.aggregate(lrn.Dataset(21), f, l, s, 0)


def test_dataset_csv_round_trip(tmp_path):
    d = lrn.aggregate(lrn.Dataset(21), *_records(12, np.random.default_rng(10)), 3)
    d.to_csv(tmp_path / "d.csv")
    e = lrn.Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(d.features, e.features) and np.array_equal(d.labels, e.labels)
    assert np.array_equal(d.states, e.states) and np.array_equal(d.iters, e.iters)


def test_ensemble_save_load(tmp_path):
    X, y = _linear_data(np.random.default_rng(12))
    ens = lrn.fit_ensemble(X, y, LP, seed=2, outputs=("y",))
    ens.save(tmp_path / "e.npz")
    back = lrn.Ensemble.load(tmp_path / "e.npz")
    assert np.array_equal(ens.member_predictions(X), back.member_predictions(X))
    assert back.seeds == ens.seeds and back.outputs == ("y",)
