"""Pole-ladder error against the conjugation oracle as the path length grows.

    python3 scripts/transport_accuracy.py [--n 24] [--seeds 5]
"""

from __future__ import annotations

import argparse

import numpy as np

from agewarp.grid import GridGeometry
from agewarp.lie import exp
from agewarp.phantom import smooth_random_svf
from agewarp.transport import conjugation_oracle, ladder_steps, pole_ladder


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=24)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--u-max", type=float, default=2.0)
    args = ap.parse_args()
    g = GridGeometry.cube(args.n)
    inner = (slice(2, -2),) * 3
    print(f"{'|v|max':>7s} {'rungs':>6s} {'mean err':>9s} {'max err':>8s}")
    for vmax in (0.5, 1.0, 2.0, 3.0, 4.0, 6.0):
        errs = []
        for seed in range(args.seeds):
            u = smooth_random_svf(g, args.u_max, seed)
            v = smooth_random_svf(g, vmax, 10_000 + seed)
            diff = exp(pole_ladder(u, v)).vectors - conjugation_oracle(u, v).vectors
            errs.append(np.linalg.norm(diff[inner], axis=-1).max())
        n = ladder_steps(smooth_random_svf(g, vmax, 10_000))
        print(f"{vmax:7.1f} {n:6d} {np.mean(errs):9.4f} {np.max(errs):8.4f}")


if __name__ == "__main__":
    main()
