"""Modulator intensity/phase curves per push-push ratio and the optimal ratio under both criteria."""

import argparse
import csv
import math

import numpy as np

from stqrng.device import MzmConfig, device_curves, optimal_ratio


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratios", nargs="+", type=float, default=[0.2, 0.4, 0.6, 0.8, 1.0])
    ap.add_argument("--scan-step", type=float, default=0.05, help="ratio step for the optimum search")
    ap.add_argument("--span", type=float, default=math.pi / 2, help="target output phase range (rad)")
    ap.add_argument("--out", default="device_curves.csv")
    args = ap.parse_args()

    cfg = MzmConfig()
    rows = device_curves(args.ratios, cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "phi1", "intensity", "phase"])
        w.writerows(rows)
    print(f"{len(rows)} rows -> {args.out}")

    grid = np.round(np.arange(0.1, 1.0 + args.scan_step / 2, args.scan_step), 6)
    for crit in ("equal_intensity", "min_ripple"):
        r, wp = optimal_ratio(grid, cfg, args.span, crit)
        print(f"{crit:>16}: r = {r:.4f}  bias = {wp.bias:+.4f}  phi1 = [{wp.phi1_start:.4f}, {wp.phi1_end:.4f}]  "
              f"ripple = {wp.ripple:.4f}  intensity = {wp.intensity:.4f}")


if __name__ == "__main__":
    main()
