"""End-to-end surrogates: ray-fan observations, DAgger dataset, ridge ensembles.

Two ensembles are trained on the same inputs: M_com predicts the expert
label (delta, v_target) and M_st the partial state (x_lat, theta, c).  Each
member is a random Fourier feature regressor (fixed random projection,
cosine nonlinearity, plus the raw inputs) with a closed-form ridge read-out
fitted on a bootstrap resample.  The spread of member predictions is the
epistemic uncertainty handed to the safety filter.
"""
from __future__ import annotations

import csv
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .belief import GaussianBelief
from .track import GlobalPose, TrackDef

FORMAT_VERSION = 1
MIN_RECORDS = 50
FAN_HALF_ANGLE = np.deg2rad(100.0)


class LearnerError(ValueError):
    pass


class MissingLabels(LearnerError):
    pass


class TooFewRecords(LearnerError):
    pass


@dataclass(frozen=True)
class LearnerParams:
    n_rays: int = 21
    r_max: float = 15.0
    n_members: int = 10
    width: int = 512
    ridge: float = 1e-2
    lengthscale: float = 3.0
    bootstrap: bool = True
    ray_noise: float = 0.0   # std of additive range noise on each ray, meters

    def __post_init__(self):
        if self.n_rays < 2:
            raise ValueError("n_rays must be >= 2")
        if self.r_max <= 0 or self.ridge < 0 or self.lengthscale <= 0:
            raise ValueError("r_max and lengthscale must be positive, ridge non-negative")
        if self.n_members < 1 or self.width < 1:
            raise ValueError("n_members and width must be >= 1")


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True, eq=False)
class Observation:
    rays: np.ndarray
    v: float
    v_perp: float
    omega: float

    def features(self):
        return np.concatenate([self.rays, [self.v, self.v_perp, self.omega]])


def fan_bearings(n_rays: int):
    """Ray bearings in the vehicle frame, right (-100 deg) to left (+100 deg)."""
    return np.linspace(-FAN_HALF_ANGLE, FAN_HALF_ANGLE, n_rays)


@functools.lru_cache(maxsize=8)
def _boundary_segments(track: TrackDef):
    starts, vecs = [], []
    for poly in track.boundaries:
        q = np.roll(poly, -1, axis=0) if track.closed else poly[1:]
        a = poly if track.closed else poly[:-1]
        starts.append(a)
        vecs.append(q - a)
    a = np.vstack(starts)
    d = np.vstack(vecs)
    return a, d, float(np.hypot(*d.T).max())


def cast_rays(origin, directions, track: TrackDef, r_max: float):
    """Distance along each unit direction to the first lane-boundary crossing, capped at r_max."""
    a, d, seg_max = _boundary_segments(track)
    o = np.asarray(origin, dtype=float)
    rel = a - o
    near = np.hypot(*rel.T) <= r_max + seg_max
    rel, d = rel[near], d[near]
    r = np.asarray(directions, dtype=float)  # (K, 2)
    # o + t r = a + w d  ->  t = (rel x d) / (r x d), w = (rel x r) / (r x d)
    denom = r[:, 0:1] * d[None, :, 1] - r[:, 1:2] * d[None, :, 0]
    rel_x_d = rel[:, 0] * d[:, 1] - rel[:, 1] * d[:, 0]
    rel_x_r = rel[None, :, 0] * r[:, 1:2] - rel[None, :, 1] * r[:, 0:1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = rel_x_d[None, :] / denom
        w = rel_x_r / denom
    ok = (np.abs(denom) > 1e-12) & (t >= 0.0) & (w >= 0.0) & (w <= 1.0)
    t = np.where(ok, t, np.inf)
    return np.minimum(t.min(axis=1, initial=np.inf), r_max)


def observe(pose: GlobalPose, speeds, track: TrackDef, n_rays: int, r_max: float, noise: float = 0.0,
            rng=None) -> Observation:
    """Ray fan reading at ``pose``; with ``noise`` > 0 each range gets Gaussian error (needs ``rng``)."""
    ang = pose.psi + fan_bearings(n_rays)
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    rays = cast_rays([pose.x, pose.y], dirs, track, r_max)
    if noise > 0.0:
        rays = np.clip(rays + noise * rng.standard_normal(n_rays), 0.0, r_max)
    v, v_perp, omega = speeds
    return Observation(rays, float(v), float(v_perp), float(omega))


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True, eq=False)
class Dataset:
    """Append-only records: observation features, expert labels, partial states, iteration tags."""

    n_rays: int
    features: np.ndarray = None   # (N, n_rays + 3)
    labels: np.ndarray = None     # (N, 2): delta, v_target
    states: np.ndarray = None     # (N, 3): x_lat, theta, c
    iters: np.ndarray = None      # (N,)

    def __post_init__(self):
        k = self.n_rays + 3
        if self.features is None:
            object.__setattr__(self, "features", np.zeros((0, k)))
            object.__setattr__(self, "labels", np.zeros((0, 2)))
            object.__setattr__(self, "states", np.zeros((0, 3)))
            object.__setattr__(self, "iters", np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.iters)

    def iteration(self, k) -> "Dataset":
        m = self.iters == k
        return Dataset(self.n_rays, self.features[m], self.labels[m], self.states[m], self.iters[m])

    def csv_header(self):
        return ([f"ray_{i}" for i in range(self.n_rays)] + ["v", "v_perp", "omega", "delta", "v_target",
                                                            "x_lat", "theta", "c", "iter"])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.csv_header())
            for f, l, s, k in zip(self.features, self.labels, self.states, self.iters):
                w.writerow([f"{v:.17g}" for v in np.concatenate([f, l, s])] + [int(k)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n_rays = sum(h.startswith("ray_") for h in header)
        if not body:
            return cls(n_rays)
        arr = np.array([[float(v) for v in r] for r in body])
        k = n_rays + 3
        return cls(n_rays, arr[:, :k], arr[:, k:k + 2], arr[:, k + 2:k + 5], arr[:, -1].astype(int))


def aggregate(data: Dataset, observations, labels, states, it: int) -> Dataset:
    """A new dataset with the trajectory's records appended under tag ``it``."""
    feats = np.array([o.features() if isinstance(o, Observation) else np.asarray(o, dtype=float)
                      for o in observations]).reshape(-1, data.n_rays + 3)
    labels = np.asarray(labels, dtype=float).reshape(-1, 2)
    states = np.asarray(states, dtype=float).reshape(-1, 3)
    if not len(feats) == len(labels) == len(states):
        raise ValueError("observations, labels and states differ in length")
    if not np.all(np.isfinite(labels)):
        raise MissingLabels("records without expert labels")
    if len(data) and it < data.iters.max():
        raise ValueError(f"iteration {it} precedes existing records (max {data.iters.max()})")
    return Dataset(data.n_rays, np.vstack([data.features, feats]), np.vstack([data.labels, labels]),
                   np.vstack([data.states, states]),
                   np.concatenate([data.iters, np.full(len(feats), it, dtype=int)]))


# ---------------------------------------------------------------------------
# ensembles


@dataclass(eq=False)
class Ensemble:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    W: np.ndarray      # (n_members, d, width)
    b: np.ndarray      # (n_members, width)
    beta: np.ndarray   # (n_members, width + d + 1, n_out)
    seeds: list = field(default_factory=list)
    outputs: tuple = ()

    @property
    def n_members(self):
        return len(self.W)

    def member_predictions(self, X):
        """(n_members, m, n_out) predictions for inputs X (m, d)."""
        Z = (np.atleast_2d(X) - self.x_mean) / self.x_scale
        out = np.empty((self.n_members, len(Z), self.beta.shape[2]))
        for i in range(self.n_members):
            out[i] = _design(Z, self.W[i], self.b[i]) @ self.beta[i]
        return out * self.y_scale + self.y_mean

    def belief(self, x) -> GaussianBelief:
        return GaussianBelief.from_samples(self.member_predictions(np.asarray(x)[None])[:, 0, :])

    def save(self, path):
        header = dict(version=FORMAT_VERSION, n_members=self.n_members, d=int(self.W.shape[1]),
                      width=int(self.W.shape[2]), n_out=int(self.beta.shape[2]), seeds=list(self.seeds),
                      outputs=list(self.outputs))
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), x_mean=self.x_mean, x_scale=self.x_scale,
                     y_mean=self.y_mean, y_scale=self.y_scale, W=self.W, b=self.b, beta=self.beta)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            if header["version"] != FORMAT_VERSION:
                raise LearnerError(f"unsupported ensemble format {header['version']}")
            return cls(z["x_mean"], z["x_scale"], z["y_mean"], z["y_scale"], z["W"], z["b"], z["beta"],
                       header["seeds"], tuple(header["outputs"]))


def _design(Z, W, b):
    width = W.shape[1]
    return np.hstack([np.sqrt(2.0 / width) * np.cos(Z @ W + b), Z, np.ones((len(Z), 1))])


def _scale(a):
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    return mu, np.where(sd > 1e-9, sd, 1.0)


def fit_ensemble(X, Y, lp: LearnerParams, seed: int, shared_seed: bool = False, outputs=()):
    """Fit one ensemble; member i draws its features and bootstrap from its own seed."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not np.all(np.isfinite(Y)):
        raise MissingLabels("non-finite training targets")
    n, d = X.shape
    if n < MIN_RECORDS:
        raise TooFewRecords(f"{n} records; need at least {MIN_RECORDS}")
    x_mean, x_scale = _scale(X)
    y_mean, y_scale = _scale(Y)
    Z = (X - x_mean) / x_scale
    T = (Y - y_mean) / y_scale
    if shared_seed:
        seeds = [int(seed)] * lp.n_members
    else:
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(lp.n_members)]
    Ws, bs, betas = [], [], []
    for sd in seeds:
        rng = np.random.default_rng(sd)
        W = rng.normal(0.0, 1.0 / lp.lengthscale, size=(d, lp.width))
        b = rng.uniform(0.0, 2 * np.pi, size=lp.width)
        idx = rng.integers(0, n, size=n) if lp.bootstrap else np.arange(n)
        Phi = _design(Z[idx], W, b)
        reg = np.full(Phi.shape[1], lp.ridge)
        reg[-1] = 0.0  # leave the intercept unpenalized
        beta = np.linalg.solve(Phi.T @ Phi + np.diag(reg), Phi.T @ T[idx])
        Ws.append(W)
        bs.append(b)
        betas.append(beta)
    return Ensemble(x_mean, x_scale, y_mean, y_scale, np.array(Ws), np.array(bs), np.array(betas),
                    seeds, tuple(outputs))


def fit(data: Dataset, lp: LearnerParams, seed: int, shared_seed: bool = False):
    """(M_com, M_st) trained on every record in ``data``."""
    if len(data) < MIN_RECORDS:
        raise TooFewRecords(f"{len(data)} records; need at least {MIN_RECORDS}")
    # one joint solve per member: both ensembles share features and bootstraps
    joint = fit_ensemble(data.features, np.hstack([data.labels, data.states]), lp, seed, shared_seed)

    def part(cols, names):
        return Ensemble(joint.x_mean, joint.x_scale, joint.y_mean[cols], joint.y_scale[cols], joint.W,
                        joint.b, joint.beta[:, :, cols], joint.seeds, names)

    return part(slice(0, 2), ("delta", "v_target")), part(slice(2, 5), ("x_lat", "theta", "c"))


def predict_control(m_com: Ensemble, obs: Observation) -> GaussianBelief:
    return m_com.belief(obs.features())


def predict_state(m_st: Ensemble, obs: Observation) -> GaussianBelief:
    return m_st.belief(obs.features())


def state_samples(state_belief: GaussianBelief, v, v_perp, omega):
    """Full dynamic-state samples: learned (x_lat, theta, c) plus measured speeds."""
    S = state_belief.samples
    n = len(S)
    return np.column_stack([S[:, 0], S[:, 1], np.full(n, omega), np.full(n, v), np.full(n, v_perp), S[:, 2]])


def save_models(directory, m_com: Ensemble, m_st: Ensemble, tag: str = ""):
    directory = Path(directory)
    m_com.save(directory / f"m_com{tag}.npz")
    m_st.save(directory / f"m_st{tag}.npz")
