"""Write (t, sigma^2(t), cumulative) CSV series for a model file.

    python3 scripts/variance_profile.py configs/queue_rush_hour.json --state 1
"""

import argparse
import sys

import numpy as np

from twoscale.diffusion_limit import variance_profile
from twoscale.harness import resolve_model
from twoscale.queue_models import build_generator


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("model", nargs="?", default="reference")
    parser.add_argument("--weights", type=float, nargs="*")
    parser.add_argument("--state", type=int, help="indicator weights e_state (queue occupation time)")
    parser.add_argument("--points", type=int, default=101)
    args = parser.parse_args()

    kind, obj = resolve_model(args.model)
    A = build_generator(obj) if kind == "queue" else obj.fast
    horizon = obj.horizon
    m = A.dimension
    if args.state is not None:
        F = np.eye(m)[args.state]
    elif args.weights:
        F = np.array(args.weights)
    else:
        F = np.eye(m)[0] - np.eye(m)[-1]
    grid = np.linspace(0.0, horizon, args.points)
    prof = variance_profile(A, F, grid)
    out = sys.stdout
    out.write("t,sigma2,cumulative\n")
    for t, s2, c in zip(grid, prof.sigma2, prof.cumulative):
        out.write(f"{t:.6g},{s2:.10g},{c:.10g}\n")


if __name__ == "__main__":
    main()
