"""Run every experiment config in configs/ and print a one-line verdict each.

    python3 scripts/run_all.py --out results/ --threads 1
"""

import argparse
import time
from pathlib import Path

from twoscale.harness import ExperimentConfig, run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--only", nargs="*", help="config stems to run (default: all experiment configs)")
    args = parser.parse_args()

    for path in sorted(CONFIGS.glob("*.json")):
        if args.only and path.stem not in args.only:
            continue
        try:
            cfg = ExperimentConfig.load(path)
        except (TypeError, KeyError, ValueError):
            continue  # model files, not experiment configs
        cfg.threads = args.threads
        tick = time.perf_counter()
        report = run_experiment(cfg)
        report.write(Path(args.out) / path.stem)
        failed = [k for k, v in report.checks.items() if not v]
        slope = "" if report.slope is None else f" slope={report.slope:.3f}"
        print(f"{path.stem:20s} {'PASS' if report.passed else 'FAIL'}{slope} "
              f"({time.perf_counter() - tick:.1f}s){' failed: ' + ', '.join(failed) if failed else ''}")


if __name__ == "__main__":
    main()
