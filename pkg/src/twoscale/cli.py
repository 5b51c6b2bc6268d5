"""Command line entry point: ``twoscale {validate,analyze,expand,simulate,experiment}``.

Exit codes: 0 pass, 2 threshold failure, 1 runtime error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .chain_core import group_inverse_stack, stationary_vector, validate_generator
from .diffusion_limit import sigma_squared, sigma_squared_quadrature_oracle, variance_profile
from .errors import TwoScaleError
from .expansion import build_expansion, layer_ode_residual, phi_residual
from .harness import ExperimentConfig, _jsonable, resolve_model, run_experiment
from .queue_models import queue_two_scale_model
from .simulator import OccupationSpec, monte_carlo, sample_path, write_paths_csv

EXIT_OK, EXIT_ERROR, EXIT_FAIL, EXIT_USAGE = 0, 1, 2, 64

SCHEMA_HELP = """\
config file (JSON):
  model           "reference" | path to a model/generator/queue JSON | inline object
                    model:     {"fast": <generator>, "slow": <generator>, "T": 1.0}
                    generator: {"m0": int, "terms": [{"coeff": [[...]], "time_poly": [c0, c1, ...]}]}
                    queue:     {"m0": int, "lambda_base": [...], "mu_base": [...],
                                "lambda_mod_poly": [...], "mu_mod_poly": [...], "T": 1.0}
  kind            experiment only: expansion_error | second_moment | clt | rate_proxy | queue_demo
  weights         occupation weights F (default e_0 - e_last)
  epsilons        strictly decreasing list in (0, 1]
  replications    Monte Carlo paths (>= 100 for statistical kinds)
  seed            base seed (overridden by --seed)
  order           expansion order (expand, expansion_error)
  t0              layer anchor for expand (default 0)
  initial_state   state index or "stationary"
  state           queue state for queue_demo
  grid_points     evaluation points on [0, T] for analyze/expand (default 101)
  dump_paths      simulate: number of paths written to paths.csv
  thresholds      per-kind overrides of pass/fail thresholds
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twoscale", description=__doc__, epilog=SCHEMA_HELP,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("validate", "check generator invariants and weak irreducibility"),
        ("analyze", "variance rate sigma^2 and its running integral"),
        ("expand", "dump asymptotic expansion terms"),
        ("simulate", "Monte Carlo summary of the scaled occupation measure"),
        ("experiment", "run a convergence or statistical experiment"),
    ]:
        p = sub.add_parser(name, help=text, epilog=SCHEMA_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="JSON config or model file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def _load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = json.loads(path.read_text())
    if "model" not in doc and "kind" not in doc:
        doc = {"model": str(path)}
    elif isinstance(doc.get("model"), str) and doc["model"] != "reference":
        candidate = path.parent / doc["model"]
        if candidate.exists():
            doc["model"] = str(candidate)
    return doc


def _chain(doc: dict, epsilon: float = 1.0):
    kind, obj = resolve_model(doc.get("model", "reference"))
    model = queue_two_scale_model(obj, epsilon) if kind == "queue" else obj.with_epsilon(epsilon)
    return model


def _emit(doc: dict, out: Path | None, name: str) -> None:
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    print(text)


def cmd_validate(args, doc) -> int:
    model = _chain(doc)
    probes = np.linspace(0.0, model.horizon, 101)
    result = {}
    ok = True
    for label, g in (("fast", model.fast), ("slow", model.slow)):
        rep = validate_generator(g, probes)
        result[label] = rep.to_dict()
        ok &= rep.ok
    try:
        stationary_vector(model.fast(probes))
        result["weakly_irreducible"] = True
    except TwoScaleError as exc:
        result["weakly_irreducible"] = False
        result["irreducibility_error"] = str(exc)
        ok = False
    result["valid"] = ok
    _emit(result, args.out and Path(args.out), "validation.json")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_analyze(args, doc) -> int:
    model = _chain(doc)
    F = np.asarray(doc.get("weights") or np.eye(model.dimension)[0] - np.eye(model.dimension)[-1], dtype=float)
    grid = np.linspace(0.0, model.horizon, int(doc.get("grid_points", 101)))
    prof = variance_profile(model.fast, F, grid)
    check_idx = np.unique(np.linspace(0, grid.size - 1, 11).astype(int))
    deviation = max(abs(sigma_squared(model.fast, F, grid[i]) - sigma_squared_quadrature_oracle(model.fast, F, grid[i]))
                    for i in check_idx)
    nus = stationary_vector(model.fast(grid))
    raw = -2.0 * np.einsum("ki,kij,j->k", nus * F, group_inverse_stack(model.fast(grid), nus), F)
    report = prof.to_dict(oracle_deviation=deviation, clamp_count=int(np.sum(raw < 0)))
    report["weights"] = F
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "variance.csv").open("w") as fh:
            fh.write("t,sigma2,cumulative\n")
            for t, s2, c in zip(grid, prof.sigma2, prof.cumulative):
                fh.write(f"{t!r},{float(s2)!r},{float(c)!r}\n")
    if args.format == "csv":
        print("t,sigma2,cumulative")
        for t, s2, c in zip(grid, prof.sigma2, prof.cumulative):
            print(f"{t!r},{float(s2)!r},{float(c)!r}")
        if out is not None:
            (out / "variance_report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    else:
        _emit(report, out, "variance_report.json")
    return EXIT_OK if deviation <= 1e-8 else EXIT_FAIL


def cmd_expand(args, doc) -> int:
    model = _chain(doc)
    order = int(doc.get("order", 1))
    t0 = float(doc.get("t0", 0.0))
    exp = build_expansion(model.fast, model.slow, t0, order=order, horizon=model.horizon)
    probe = np.linspace(t0, model.horizon, 20)
    exp.diagnostics["phi_residuals"] = [phi_residual(exp, k, probe) for k in range(1, order + 1)]
    exp.diagnostics["layer_ode_residuals"] = [layer_ode_residual(exp, k) for k in range(1, order + 1)]
    grid = np.linspace(t0, model.horizon, int(doc.get("grid_points", 11)))
    _emit(exp.to_json(grid), Path(args.out) if args.out else None, "expansion.json")
    return EXIT_OK


def cmd_simulate(args, doc) -> int:
    eps = float(doc.get("epsilon", (doc.get("epsilons") or [0.1])[0]))
    model = _chain(doc, eps)
    F = np.asarray(doc.get("weights") or np.eye(model.dimension)[0] - np.eye(model.dimension)[-1], dtype=float)
    seed = int(doc.get("seed", 0))
    spec = OccupationSpec(F, np.linspace(0.0, model.horizon, 11)[1:])
    init = doc.get("initial_state", "stationary")
    summary = monte_carlo(model, spec, init, int(doc.get("replications", 1000)), seed, threads=args.threads)
    out = Path(args.out) if args.out else None
    n_dump = int(doc.get("dump_paths", 0))
    if (n_dump or args.format == "csv") and out is not None:
        n_dump = n_dump or 10
        x0 = 0 if init == "stationary" else int(init)
        paths = [sample_path(model, x0, (seed, r)) for r in range(n_dump)]
        out.mkdir(parents=True, exist_ok=True)
        with (out / "paths.csv").open("w") as fh:
            write_paths_csv(paths, fh)
    _emit(summary.to_dict(), out, "summary.json")
    return EXIT_OK


def cmd_experiment(args, doc) -> int:
    doc = dict(doc)
    doc["threads"] = args.threads
    if args.out:
        doc["output"] = args.out
    cfg = ExperimentConfig.from_dict(doc)
    report = run_experiment(cfg)
    out = cfg.output
    if out is not None:
        report.write(out)
    if args.format == "csv":
        print("epsilon,metric,value,stderr")
        for eps, metric, value, se in report.table():
            print(f"{eps},{metric},{value},{'' if se is None else se}")
    else:
        print(report.to_json())
    return EXIT_OK if report.passed else EXIT_FAIL


COMMANDS = {
    "validate": cmd_validate,
    "analyze": cmd_analyze,
    "expand": cmd_expand,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}\n", file=sys.stderr)
        print(parser.format_usage() + "\n" + SCHEMA_HELP, file=sys.stderr)
        return EXIT_USAGE
    try:
        doc = _load(args.config)
        if args.seed is not None:
            doc["seed"] = args.seed
        return COMMANDS[args.command](args, doc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (TwoScaleError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
