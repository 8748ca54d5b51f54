"""Run both arms for every seed in a config and print a per-seed summary.

    python3 scripts/run_experiment.py configs/default.cfg runs/default
"""
import argparse
import logging
from pathlib import Path

from saferace.harness import first_completed, load_config, prepare, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("out")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = load_config(args.config)
    setup = prepare(cfg)
    for seed in cfg.seeds:
        res = run_experiment(cfg, seed=seed, out_dir=Path(args.out) / f"seed_{seed}", setup=setup)
        for flag, arm in res.items():
            tail = " ".join(f"{st.mean_deviation:.4f}" for st in arm.stats[-3:])
            print(f"seed {seed} cbf {'on ' if flag else 'off'}: first completed lap {first_completed(arm.stats)}, "
                  f"last 3 mean deviations {tail}")


if __name__ == "__main__":
    main()
