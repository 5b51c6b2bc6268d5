"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -m acceptance -s`` to see the verdict lines.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from conftest import random_generator
from twoscale.chain_core import PolynomialGenerator, quasi_stationary, spectral_gap
from twoscale.diffusion_limit import initial_layer_bias, sigma_squared, sigma_squared_quadrature_oracle
from twoscale.expansion import build_expansion, fit_layer_decay
from twoscale.harness import ExperimentConfig, reference_model, run_experiment, strip_timings
from twoscale.queue_models import QueueModel, build_generator, queue_nu_closed_form
import json

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SYM2 = np.array([[-1.0, 1.0], [1.0, -1.0]])


def verdict(number, title, ok, detail, elapsed=None, budget=None):
    within = elapsed is None or budget is None or elapsed <= budget
    timing = "" if elapsed is None else f" [{elapsed:.1f}s / budget {budget:.0f}s]"
    print(f"\nACCEPTANCE {number} {'PASS' if ok and within else 'FAIL'}: {title}: {detail}{timing}")
    assert ok, detail
    assert within, f"runtime {elapsed:.1f}s exceeds {budget}s"


@pytest.fixture(scope="module")
def second_moment_reports():
    cfg = ExperimentConfig.load(CONFIGS / "second_moment.json")
    tick = time.perf_counter()
    single = run_experiment(cfg)
    elapsed = time.perf_counter() - tick
    cfg.threads = 8
    parallel = run_experiment(cfg)
    return single, parallel, elapsed


def test_1_homogeneous_exactness():
    tick = time.perf_counter()
    q = np.array([[-2.0, 1.5, 0.5], [1.0, -1.0, 0.0], [0.3, 0.7, -1.0]])
    A, B = PolynomialGenerator.constant(q), PolynomialGenerator.zero(3)
    grid = np.linspace(0.0, 1.0, 20)
    worst = 0.0
    for eps in (0.1, 0.01):
        for t0 in grid:
            exp = build_expansion(A, B, t0, order=0)
            ts = grid[grid >= t0]
            exact = np.stack([expm(q * (t - t0) / eps) for t in ts])
            worst = max(worst, float(np.abs(exp.evaluate(ts, eps) - exact).sum(axis=2).max()))
    verdict(1, "homogeneous exactness", worst < 1e-10, f"max error {worst:.2e} (< 1e-10)",
            time.perf_counter() - tick, 5)


@pytest.mark.parametrize("order,band", [(0, (0.7, 1.3)), (1, (1.6, 2.4))])
def test_2_expansion_order(order, band):
    tick = time.perf_counter()
    rep = run_experiment(ExperimentConfig.load(CONFIGS / f"expansion_order{order}.json"))
    errs = ", ".join(f"{r['epsilon']}: {r['error']:.2e}" for r in rep.rows)
    ok = band[0] <= rep.slope <= band[1]
    verdict(2, f"expansion order n={order}", ok,
            f"slope {rep.slope:.3f} +- {rep.slope_se:.3f} in {list(band)}; errors {errs}",
            time.perf_counter() - tick, 120)


def test_3_layer_decay():
    tick = time.perf_counter()
    details, ok = [], True
    cases = [("two-state", PolynomialGenerator.constant(SYM2), PolynomialGenerator.zero(2), 0.0, 2.0)]
    ref = reference_model()
    for t0 in (0.0, 0.5, 1.0):
        cases.append((f"reference t0={t0}", ref.fast, ref.slow, t0, spectral_gap(ref.fast(t0))))
    for name, A, B, t0, gap in cases:
        rate, _ = fit_layer_decay(build_expansion(A, B, t0, order=0), 0)
        rel = abs(rate - gap) / gap
        ok &= rel <= 0.1
        details.append(f"{name}: {rate:.4f} vs gap {gap:.4f}")
    verdict(3, "layer decay", ok, "; ".join(details), time.perf_counter() - tick, 5)


def test_4_sigma_oracle_equivalence():
    tick = time.perf_counter()
    rng = np.random.default_rng(20240917)
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(2, 7))
        gen = PolynomialGenerator([random_generator(rng, m), random_generator(rng, m, 0.0, 0.5)])
        F = rng.normal(size=m)
        s = float(rng.uniform(0, 1))
        worst = max(worst, abs(sigma_squared(gen, F, s) - sigma_squared_quadrature_oracle(gen, F, s)))
    two = sigma_squared(PolynomialGenerator.constant(SYM2), [1.0, 0.0], 0.0)
    ok = worst <= 1e-8 and abs(two - 0.25) <= 1e-10
    verdict(4, "sigma^2 oracle equivalence", ok,
            f"max deviation {worst:.2e} over 50 instances; two-state value {two!r}", time.perf_counter() - tick, 30)


def test_5a_second_moment_bounds(second_moment_reports):
    # Expected to fail at the larger epsilons: the exact second moment (column
    # exact_deviation, from a deterministic ODE) already misses 0.1 * V there.
    rep, _, elapsed = second_moment_reports
    V = rep.extra["integrated_variance"]
    parts = [f"eps={r['epsilon']}: dev {r['deviation']:+.4f} (exact {r['exact_deviation']:+.4f}) "
             f"bound {r['bound']:.4f}" for r in rep.rows]
    ok = all(rep.checks[f"deviation_eps={r['epsilon']}"] for r in rep.rows)
    verdict("5a", "second moment per-eps bound", ok, f"V={V:.4f}; " + "; ".join(parts), elapsed, 600)


def test_5b_second_moment_slope(second_moment_reports):
    rep, _, elapsed = second_moment_reports
    ok = rep.checks["resolved_slope_in_band"]
    verdict("5b", "second moment resolved slope", ok,
            f"slope {rep.slope:.3f} +- {rep.slope_se:.3f} in [0.6, 1.4] over eps {rep.extra['resolved_epsilons']}",
            elapsed, 600)


def test_6_clt():
    tick = time.perf_counter()
    rep = run_experiment(ExperimentConfig.load(CONFIGS / "clt.json"))
    last = rep.rows[-1]
    detail = f"eps={last['epsilon']} KS D={last['ks_statistic']:.4f} p={last['ks_p_value']:.3f}"
    if "reseeded" in rep.extra:
        detail += f"; reseeded p={rep.extra['reseeded']['ks_p_value']:.3f}"
    detail += f"; calibration p={rep.extra['calibration']['ks_p_value']:.3f}"
    verdict(6, "CLT", rep.checks["smallest_eps_p_value"], detail, time.perf_counter() - tick, 300)


def test_7_initial_layer_bias():
    tick = time.perf_counter()
    from twoscale.chain_core import TwoScaleModel
    worst = 0.0
    ts = np.linspace(0.0, 1.0, 21)
    for eps in (0.1, 0.05, 0.01):
        model = TwoScaleModel(PolynomialGenerator.constant(SYM2), PolynomialGenerator.zero(2), eps)
        x = initial_layer_bias(model, 0, [1.0, 0.0], ts)
        worst = max(worst, float(np.abs(x - eps / 4 * (1 - np.exp(-2 * ts / eps))).max()))
    grid = np.linspace(0.0, 1.0, 41)
    ratios = [np.abs(initial_layer_bias(reference_model(eps), 0, [1.0, 0.0, -1.0], grid)).max() / eps
              for eps in (0.1, 0.05, 0.02)]
    spread = max(ratios) / min(ratios)
    ok = worst <= 1e-8 and spread < 4
    verdict(7, "initial-layer bias", ok,
            f"closed-form error {worst:.2e}; sup|X|/eps = {', '.join(f'{r:.4f}' for r in ratios)} (spread {spread:.2f})",
            time.perf_counter() - tick, 30)


def test_8_queue():
    tick = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        m0 = int(rng.integers(1, 7))
        q = QueueModel(m0, rng.uniform(0.3, 3.0, m0), rng.uniform(0.3, 3.0, m0),
                       lambda_mod=(rng.uniform(0.5, 2.0), rng.uniform(-0.3, 0.3)),
                       mu_mod=(rng.uniform(0.5, 2.0), rng.uniform(0.0, 0.5)))
        ts = rng.uniform(0, 1, 20)
        worst = max(worst, float(np.abs(quasi_stationary(build_generator(q), ts) - queue_nu_closed_form(q, ts)).max()))
    rep = run_experiment(ExperimentConfig.load(CONFIGS / "queue_demo.json"))
    cov = rep.rows[0]["coverage_95"]
    ok = worst <= 1e-12 and 0.93 <= cov <= 0.97
    verdict(8, "queue oracle and band coverage", ok,
            f"nu deviation {worst:.2e}; 95% coverage {cov:.4f} (90%: {rep.rows[0]['coverage_90']:.4f})",
            time.perf_counter() - tick, 300)


def test_9_rate_proxy():
    tick = time.perf_counter()
    rep = run_experiment(ExperimentConfig.load(CONFIGS / "rate_proxy.json"))
    w = ", ".join(f"{r['epsilon']}: {r['w1']:.4f}" for r in rep.rows)
    ok = rep.passed and rep.label.startswith("PROXY")
    verdict(9, "rate proxy (Wasserstein-1)", ok, f"W1 {w}; slope {rep.slope:.3f}; label '{rep.label[:5]}'",
            time.perf_counter() - tick, 600)


def test_10_determinism(second_moment_reports):
    single, parallel, _ = second_moment_reports
    a = json.dumps(strip_timings(json.loads(single.to_json())), sort_keys=True)
    b = json.dumps(strip_timings(json.loads(parallel.to_json())), sort_keys=True)
    verdict(10, "determinism across 1 and 8 threads", a == b,
            f"second_moment report, {len(a)} bytes, identical={a == b}")
