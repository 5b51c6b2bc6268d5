"""Sup-norm error of the order-0, 1 and 2 expansions on the reference model.

Prints err(eps) per order and the fitted log-log slope. Order 2 uses the
finite-difference derivative of Phi_1 and is not part of the harness.
"""

import argparse

import numpy as np

from twoscale.chain_core import transition_matrices
from twoscale.expansion import build_expansion
from twoscale.harness import expansion_error_grid, fit_loglog_slope, reference_model


def sup_error(model, expansions, t0_grid):
    err = 0.0
    for t0, exp in zip(t0_grid, expansions):
        ts = expansion_error_grid(t0, model.horizon, model.epsilon)
        diff = transition_matrices(model, t0, ts) - exp.evaluate(ts, model.epsilon)
        err = max(err, float(np.abs(diff).sum(axis=2).max()))
    return err


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--orders", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.05, 0.02, 0.01])
    parser.add_argument("--anchors", type=int, default=5, help="number of t0 values in [0, 1]")
    args = parser.parse_args()

    base = reference_model()
    t0_grid = np.linspace(0.0, 1.0, args.anchors)
    for n in args.orders:
        expansions = [build_expansion(base.fast, base.slow, t0, order=n) for t0 in t0_grid]
        errs = [sup_error(base.with_epsilon(e), expansions, t0_grid) for e in args.eps]
        slope, se = fit_loglog_slope(args.eps, errs)
        print(f"order {n}: " + "  ".join(f"{e:g}:{v:.3e}" for e, v in zip(args.eps, errs))
              + f"  slope {slope:.3f} +- {se:.3f}")


if __name__ == "__main__":
    main()
