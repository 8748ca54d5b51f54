"""Command line entry points: run experiments, compute racelines, recompute stats."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .harness import ARMS, LapStats, first_completed, load_config, run_experiment, stats_from_run, write_stats
from .raceline import VelocityLimits, compute_raceline, write_raceline_csv
from .track import load_track


def _print_stats(stats, out=None):
    out = out or sys.stdout
    out.write(",".join(LapStats.FIELDS) + "\n")
    for st in stats:
        out.write(",".join(st.row()) + "\n")


def cmd_run(args):
    cfg = load_config(args.config)
    if args.cbf is not None:
        cfg = dataclasses.replace(cfg, cbf=args.cbf)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    base = Path(args.out)
    for seed in seeds:
        out = base if len(seeds) == 1 else base / f"seed_{seed}"
        res = run_experiment(cfg, seed=seed, out_dir=out)
        stats = [st for r in res.values() for st in r.stats]
        print(f"# seed {seed} -> {out}")
        _print_stats(stats)
        for flag, r in res.items():
            print(f"# cbf {'on' if flag else 'off'}: first completed learner lap = {first_completed(r.stats)}")
    return 0


def cmd_raceline(args):
    track = load_track(args.track, closed=not args.open)
    limits = VelocityLimits(a_lat_max=args.a_lat_max, a_lon_accel_max=args.a_accel_max,
                            a_lon_brake_max=args.a_brake_max, v_max=args.v_max)
    traj = compute_raceline(track, args.w_veh, limits)
    write_raceline_csv(args.out, traj)
    print(f"wrote {len(traj.s)} points to {args.out}")
    return 0


def cmd_stats(args):
    stats = stats_from_run(args.run)
    if not stats:
        print(f"no trajectory logs under {args.run}", file=sys.stderr)
        return 1
    if args.write:
        write_stats(Path(args.run) / "stats.csv", stats)
    _print_stats(stats)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="saferace", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the iterative training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--cbf", choices=sorted(ARMS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(func=cmd_run)

    lim = VelocityLimits()
    p = sub.add_parser("raceline", help="minimum-curvature raceline for a track CSV (x,y,w_half)")
    p.add_argument("--track", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--w-veh", type=float, default=1.8)
    p.add_argument("--open", action="store_true", help="treat the track as open")
    p.add_argument("--v-max", type=float, default=lim.v_max)
    p.add_argument("--a-lat-max", type=float, default=lim.a_lat_max)
    p.add_argument("--a-accel-max", type=float, default=lim.a_lon_accel_max)
    p.add_argument("--a-brake-max", type=float, default=lim.a_lon_brake_max)
    p.set_defaults(func=cmd_raceline)

    p = sub.add_parser("stats", help="recompute lap statistics from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--write", action="store_true", help="also rewrite stats.csv")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
