"""Experiment driver: DAgger iterations with and without the safety filter.

Iteration 0 is driven by the MPC expert.  Later iterations are driven by the
learned controller, either directly (mean of M_com) or through the safety
filter, while the expert runs in shadow mode to label every visited state.
"""
from __future__ import annotations

import ast
import configparser
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learner as lrn
from .belief import GaussianBelief
from .cbf_safety import CBFParams, LABELS, SampledSafetyFilter
from .expert_mpc import MPCConfig, PIDGains, PIDState, mpc_solve, pid_speed, reference_states, shifted
from .qpsolver import QPFailure
from .raceline import RacelineTrajectory, VelocityLimits, centerline_reference, compute_raceline
from .simulator import Vehicle
from .track import TrackDef, build_track, default_circuit, load_track
from .vehicle import DYNAMIC, KINEMATIC, VehicleParams

log = logging.getLogger(__name__)

ARMS = {"on": (True,), "off": (False,), "both": (True, False)}


@dataclass
class ExperimentConfig:
    track: str = "default"           # "default" or a path to an x,y,w_half CSV
    closed: bool = True
    track_scale: float = 1.0         # only for the default circuit
    reference: str = "raceline"      # raceline | centerline
    w_veh: float = 1.8
    model: str = DYNAMIC
    dt: float = 0.02
    n_iterations: int = 12
    steps_per_lap: int = 1500
    seeds: tuple = (0,)
    cbf: str = "both"                # on | off | both
    state_source: str = "learned"    # learned | truth (ground-truth, zero-spread beliefs)
    noise_std: tuple = (0.0, 0.0, 0.0)  # injected per-sample noise on (x_lat, theta, c)
    crash_margin: float = 0.5
    save_models: bool = False
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: MPCConfig = field(default_factory=MPCConfig)
    cbf_params: CBFParams = field(default_factory=CBFParams)
    learner: lrn.LearnerParams = field(default_factory=lrn.LearnerParams)
    pid: PIDGains = field(default_factory=PIDGains)
    limits: VelocityLimits = field(default_factory=VelocityLimits)

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0.0 < self.dt <= 0.1:
            raise ValueError("dt must be in (0, 0.1] (it is also the integration step)")
        if self.reference not in ("raceline", "centerline"):
            raise ValueError(f"unknown reference {self.reference!r}")
        if self.model not in (DYNAMIC, KINEMATIC):
            raise ValueError(f"unknown model {self.model!r}")
        if self.cbf not in ARMS:
            raise ValueError(f"cbf must be one of {sorted(ARMS)}")
        if self.state_source not in ("learned", "truth"):
            raise ValueError(f"unknown state_source {self.state_source!r}")
        if len(self.noise_std) != 3 or min(self.noise_std) < 0:
            raise ValueError("noise_std needs three non-negative entries")

    @property
    def lane_width(self):
        return self.cbf_params.lane_width

    def to_dict(self):
        return dataclasses.asdict(self)


# key prefix -> nested config field
SECTIONS = {"vehicle": "vehicle", "mpc": "mpc", "cbf": "cbf_params", "learner": "learner", "pid": "pid",
            "limits": "limits"}


def _parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(t)
    except (ValueError, SyntaxError):
        return t


def _coerce(cls, name, value):
    f = {f.name: f for f in dataclasses.fields(cls)}.get(name)
    if f is None:
        raise KeyError(f"unknown key {name!r} for {cls.__name__}")
    if isinstance(value, (int, float)) and not isinstance(value, bool) and "tuple" in str(f.type):
        return (value,)
    if isinstance(value, list):
        return tuple(value)
    if "float" in str(f.type) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def config_from_mapping(items: dict) -> ExperimentConfig:
    top, nested = {}, {k: {} for k in SECTIONS.values()}
    for key, raw in items.items():
        value = _parse_value(raw) if isinstance(raw, str) else raw
        if "." in key:
            prefix, name = key.split(".", 1)
            if prefix not in SECTIONS:
                raise KeyError(f"unknown config section {prefix!r}")
            nested[SECTIONS[prefix]][name] = value
        else:
            if key == "cbf" and isinstance(value, bool):
                value = "on" if value else "off"
            top[key] = value
    kwargs = {k: _coerce(ExperimentConfig, k, v) for k, v in top.items()}
    types = {"vehicle": VehicleParams, "mpc": MPCConfig, "cbf_params": CBFParams,
             "learner": lrn.LearnerParams, "pid": PIDGains, "limits": VelocityLimits}
    for fname, vals in nested.items():
        if vals:
            cls = types[fname]
            kwargs[fname] = cls(**{k: _coerce(cls, k, v) for k, v in vals.items()})
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Flat ``key = value`` file; nested parameters use dotted keys (``cbf.lam = 2.5``)."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string("[experiment]\n" + text)
    cfg = config_from_mapping(dict(cp["experiment"]))
    if cfg.track not in ("default",) and not Path(cfg.track).is_absolute():
        cfg = dataclasses.replace(cfg, track=str((Path(path).parent / cfg.track).resolve()))
    return cfg


# ---------------------------------------------------------------------------
# setup


@dataclass
class Setup:
    track: TrackDef
    reference: RacelineTrajectory


def prepare(cfg: ExperimentConfig) -> Setup:
    if cfg.track == "default":
        track = build_track(default_circuit(cfg.lane_width, cfg.track_scale), closed=True)
    else:
        track = load_track(cfg.track, closed=cfg.closed)
    if 2.0 * track.widths.min() < cfg.lane_width - 1e-9:
        raise ValueError(f"track narrower ({2 * track.widths.min():.3f} m) than lane_width {cfg.lane_width}")
    if cfg.reference == "raceline":
        ref = compute_raceline(track, cfg.w_veh, cfg.limits)
    else:
        ref = centerline_reference(track, cfg.limits)
    return Setup(track, ref)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class LapStats:
    iteration: int
    cbf_enabled: bool
    lap_time: float
    completed: bool
    mean_deviation: float
    max_abs_x_lat: float
    violation_steps: int

    FIELDS = ("iteration", "cbf_enabled", "lap_time", "completed", "mean_deviation", "max_abs_x_lat",
              "violation_steps")

    def row(self):
        return [str(self.iteration), "on" if self.cbf_enabled else "off", f"{self.lap_time:.2f}",
                "1" if self.completed else "0", f"{self.mean_deviation:.4f}", f"{self.max_abs_x_lat:.4f}",
                str(self.violation_steps)]


def lap_stats(rows, lane_width: float, iteration: int, cbf_enabled: bool) -> LapStats:
    """Lap statistics from trajectory log rows (dicts with t, x_lat, alpha_ref, progress)."""
    if not rows:
        return LapStats(iteration, cbf_enabled, 0.0, False, math.nan, math.nan, 0)
    t = np.array([float(r["t"]) for r in rows])
    x = np.array([float(r["x_lat"]) for r in rows])
    a = np.array([float(r["alpha_ref"]) for r in rows])
    prog = np.array([float(r["progress"]) for r in rows])
    done = np.flatnonzero(prog >= 1.0)
    completed = done.size > 0
    lap_time = float(t[done[0]]) if completed else float(t[-1])
    return LapStats(iteration, cbf_enabled, lap_time, completed, float(np.mean(np.abs(x - a))),
                    float(np.max(np.abs(x))), int(np.sum(np.abs(x) > 0.5 * lane_width)))


def write_stats(path, stats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LapStats.FIELDS)
        for st in stats:
            w.writerow(st.row())


def read_stats(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class Models:
    m_com: lrn.Ensemble
    m_st: lrn.Ensemble


@dataclass
class IterationResult:
    rows: list
    stats: LapStats
    observations: list
    labels: list
    states: list
    mpc_rows: list


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def run_iteration(setup: Setup, cfg: ExperimentConfig, models: Models | None, it: int, cbf_enabled: bool,
                  seed: int = 0) -> IterationResult:
    track, ref, p = setup.track, setup.reference, cfg.vehicle
    dt, L, lp = cfg.dt, cfg.lane_width, cfg.learner
    rng = np.random.default_rng([seed, it, int(cbf_enabled)])
    obs_rng = np.random.default_rng([seed, it, int(cbf_enabled), 1])
    alpha0, theta0, v0, _, kappa0, _ = ref.sample(0.0)
    veh = Vehicle.on_reference(track, p, cfg.model, float(alpha0), float(theta0), float(v0), float(kappa0))
    pid_state = PIDState()
    filt = SampledSafetyFilter(p, cfg.cbf_params, dt)
    warm = None
    learner_drives = it > 0 and models is not None
    noise = np.asarray(cfg.noise_std, dtype=float)
    rows, obs_log, labels, states, mpc_rows = [], [], [], [], []
    for k in range(cfg.steps_per_lap):
        fr = veh.frenet()
        v, v_perp, omega = veh.speeds()
        obs = lrn.observe(veh.pose(), (v, v_perp, omega), track, lp.n_rays, lp.r_max, lp.ray_noise, obs_rng)
        # expert (drives in iteration 0, labels in shadow mode afterwards)
        label = (math.nan, math.nan)
        mpc_ok = True
        try:
            window = reference_states(ref, veh.s, cfg.mpc, veh.model, p)
            res = mpc_solve(veh.x, window, veh.model, cfg.mpc, p, warm)
            warm = shifted(res.u_seq)
            label = (float(res.control[0]), float(res.v_target))
            mpc_rows.append([k * dt, *veh.x, *window.x_ref[1], *res.control, res.objective])
        except QPFailure as exc:
            log.warning("iteration %d step %d: expert MPC failed (%s)", it, k, exc)
            mpc_ok, warm = False, None
        diag = dict(u_mu=(math.nan, math.nan), u_sd=(math.nan, math.nan), h=[math.nan] * 4,
                    eps=[math.nan] * 4, active="")
        if not learner_drives:
            if mpc_ok:
                u = np.array([label[0], pid_speed(label[1], v, cfg.pid, dt, pid_state, p.a_x_max)])
            else:
                u = np.array([0.0, -p.a_x_max])  # zero-steer braking
        else:
            bel_u = lrn.predict_control(models.m_com, obs)
            diag["u_sd"] = tuple(bel_u.stddev)
            if cbf_enabled:
                ax = [pid_speed(vt, v, cfg.pid, dt, pid_state, p.a_x_max, update=False)
                      for vt in bel_u.samples[:, 1]]
                u_ref = GaussianBelief.from_samples(np.column_stack([bel_u.samples[:, 0], ax]))
                if cfg.state_source == "truth":
                    part = np.tile([fr.x_lat, fr.theta, fr.c], (lp.n_members, 1))
                else:
                    part = lrn.predict_state(models.m_st, obs).samples.copy()
                if noise.any():
                    part = part + rng.normal(0.0, 1.0, part.shape) * noise
                X = lrn.state_samples(GaussianBelief.from_samples(part), v, v_perp, omega)
                dc, c_rate = veh.preview(dt)
                out = filt.step(u_ref, GaussianBelief.from_samples(X), dc, c_rate, model=veh.model)
                u = out.u_safe.copy()
                pid_speed(float(bel_u.mean[1]), v, cfg.pid, dt, pid_state, p.a_x_max)  # advance the integrator
                diag.update(u_mu=tuple(u_ref.mean), h=list(out.h), eps=list(out.slacks), active="|".join(out.active))
            else:
                u = np.array([bel_u.mean[0], pid_speed(float(bel_u.mean[1]), v, cfg.pid, dt, pid_state, p.a_x_max)])
                diag["u_mu"] = tuple(u)
        alpha_ref = float(ref.alpha_at(veh.s))
        progress = veh.s / track.total_length
        pose = veh.pose()
        applied = veh.step(u, dt)
        row = dict(t=k * dt, x=pose.x, y=pose.y, psi=pose.psi, s=fr.s, progress=progress, x_lat=fr.x_lat,
                   theta=fr.theta, v=v, v_perp=v_perp, omega=omega, c=fr.c, model=veh.model,
                   alpha_ref=alpha_ref, label_delta=label[0], label_v_target=label[1],
                   u_mu_delta=diag["u_mu"][0], u_mu_a_x=diag["u_mu"][1], u_sd_delta=diag["u_sd"][0],
                   u_sd_v_target=diag["u_sd"][1], delta=float(applied[0]), a_x=float(applied[1]))
        row.update({f"h_{lab}": h for lab, h in zip(LABELS, diag["h"])})
        row.update({f"eps_{i + 1}": e for i, e in enumerate(diag["eps"])})
        row["active"] = diag["active"]
        row.update({f"ray_{i}": r for i, r in enumerate(obs.rays)})
        rows.append(row)
        if mpc_ok:
            obs_log.append(obs)
            labels.append(label)
            states.append((fr.x_lat, fr.theta, fr.c))
        # the progress after the step decides termination; the row is stamped at step start
        prog = veh.s / track.total_length
        if prog >= 1.0 or abs(veh.x_lat) > 0.5 * L + cfg.crash_margin:
            rows.append(_terminal_row(veh, ref, (k + 1) * dt, prog, row))
            break
    else:
        if rows:  # step cap: stamp the end of the last hold
            rows.append(_terminal_row(veh, ref, cfg.steps_per_lap * dt, veh.s / track.total_length, rows[-1]))
    stats = lap_stats(rows, L, it, cbf_enabled)
    return IterationResult(rows, stats, obs_log, labels, states, mpc_rows)


def _terminal_row(veh: Vehicle, ref, t, prog, template):
    fr = veh.frenet()
    pose = veh.pose()
    v, v_perp, omega = veh.speeds()
    row = {k: math.nan if isinstance(v_, float) else "" for k, v_ in template.items()}
    row.update(t=t, x=pose.x, y=pose.y, psi=pose.psi, s=fr.s, progress=prog, x_lat=fr.x_lat, theta=fr.theta,
               v=v, v_perp=v_perp, omega=omega, c=fr.c, model=veh.model, alpha_ref=float(ref.alpha_at(veh.s)))
    return row


# ---------------------------------------------------------------------------
# experiment


def _write_rows(path, rows):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _write_plotdata(path, rows, track: TrackDef):
    left, right = track.boundaries
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        for r in rows:
            w.writerow(["path", _fmt(r["x"]), _fmt(r["y"])])
        for name, poly in (("left", left), ("right", right)):
            for x, y in poly:
                w.writerow([name, _fmt(float(x)), _fmt(float(y))])


MPC_HEADER_DYN = ["t", "x_lat", "theta", "omega", "v", "v_perp", "c", "ref_x_lat", "ref_theta", "ref_omega",
                  "ref_v", "ref_v_perp", "ref_c", "delta", "a_x", "objective"]
MPC_HEADER_KIN = ["t", "x_lat", "theta", "v", "c", "ref_x_lat", "ref_theta", "ref_v", "ref_c", "delta", "a_x",
                  "objective"]


def _write_mpc_log(path, mpc_rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i, r in enumerate(mpc_rows):
            hdr = MPC_HEADER_DYN if len(r) == len(MPC_HEADER_DYN) else MPC_HEADER_KIN
            if i == 0:
                w.writerow(hdr)
            w.writerow([_fmt(float(v)) for v in r])


@dataclass
class ArmResult:
    cbf_enabled: bool
    stats: list
    dataset: lrn.Dataset


def save_iteration(directory, res: IterationResult, it: int, track: TrackDef):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_rows(directory / f"traj_{it:02d}.csv", res.rows)
    _write_plotdata(directory / f"plotdata_{it:02d}.csv", res.rows, track)
    _write_mpc_log(directory / f"mpc_{it:02d}.csv", res.mpc_rows)


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, out_dir=None, arms: str | None = None,
                   setup: Setup | None = None):
    """The full DAgger cycle for one seed and the requested arms.

    Returns {cbf_enabled: ArmResult}.  Iteration 0 (expert driven) and the
    models fitted on its data are shared by both arms.
    """
    seed = cfg.seeds[0] if seed is None else seed
    setup = setup or prepare(cfg)
    out = Path(out_dir) if out_dir is not None else None
    arm_flags = ARMS[arms or cfg.cbf]
    base = run_iteration(setup, cfg, None, 0, False, seed)
    data0 = lrn.aggregate(lrn.Dataset(cfg.learner.n_rays), base.observations, base.labels, base.states, 0)
    models0 = Models(*lrn.fit(data0, cfg.learner, seed=seed * 1000)) if cfg.n_iterations > 1 else None
    results = {}
    for flag in arm_flags:
        arm_dir = out / f"cbf_{'on' if flag else 'off'}" if out is not None else None
        st0 = dataclasses.replace(base.stats, cbf_enabled=flag)
        stats, data, models = [st0], data0, models0
        if arm_dir is not None:
            save_iteration(arm_dir, base, 0, setup.track)
        for it in range(1, cfg.n_iterations):
            res = run_iteration(setup, cfg, models, it, flag, seed)
            log.info("seed %d cbf=%s iter %d: %s", seed, flag, it, res.stats)
            stats.append(res.stats)
            if arm_dir is not None:
                save_iteration(arm_dir, res, it, setup.track)
            if res.labels:
                data = lrn.aggregate(data, res.observations, res.labels, res.states, it)
            if it < cfg.n_iterations - 1:
                models = Models(*lrn.fit(data, cfg.learner, seed=seed * 1000 + it))
        if arm_dir is not None:
            data.to_csv(arm_dir / "dataset.csv")
            if cfg.save_models and models is not None:
                lrn.save_models(arm_dir, models.m_com, models.m_st)
        results[flag] = ArmResult(flag, stats, data)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_stats(out / "stats.csv", [st for r in results.values() for st in r.stats])
        (out / "config.json").write_text(json.dumps(dict(cfg.to_dict(), seed=seed), indent=1, default=str))
    return results


def stats_from_run(run_dir):
    """Re-derive LapStats for every arm and iteration from the trajectory logs."""
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    lane_width = cfg["cbf_params"]["lane_width"]
    stats = []
    for arm in ("cbf_on", "cbf_off"):
        d = run_dir / arm
        if not d.is_dir():
            continue
        for path in sorted(d.glob("traj_*.csv")):
            it = int(path.stem.split("_")[1])
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            stats.append(lap_stats(rows, lane_width, it, arm == "cbf_on"))
    return stats


def first_completed(stats, start: int = 1):
    """Index of the first completed learner-driven iteration, or None."""
    for st in stats:
        if st.iteration >= start and st.completed:
            return st.iteration
    return None
