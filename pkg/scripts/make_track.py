"""Write a track CSV (x, y, w_half) and its raceline, as inputs for the CLI.

    python3 scripts/make_track.py circuit.csv --scale 1.0
    saferace raceline --track circuit.csv --out circuit_raceline.csv
"""
import argparse

from saferace.track import circle_points, default_circuit, write_track_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--shape", choices=["circuit", "circle"], default="circuit")
    ap.add_argument("--lane-width", type=float, default=4.0)
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--radius", type=float, default=20.0)
    args = ap.parse_args()
    if args.shape == "circle":
        pts = circle_points(args.radius, 256, args.lane_width / 2)
    else:
        pts = default_circuit(args.lane_width, args.scale)
    write_track_csv(args.out, pts)
    print(f"wrote {len(pts)} points to {args.out}")


if __name__ == "__main__":
    main()
