import json
import math
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from twoscale.chain_core import PolynomialGenerator, quasi_stationary, stationary_vector
from twoscale.cli import main
from twoscale.errors import InsufficientResolution
from twoscale.harness import (
    ExperimentConfig,
    ExperimentReport,
    calibration_checks,
    expansion_error_grid,
    fit_loglog_slope,
    ks_normal,
    normal_cdf,
    reference_model,
    reference_model_json,
    resolve_model,
    run_experiment,
    strip_timings,
    wasserstein_to_normal,
)
from twoscale.simulator import make_rng

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestReferenceModel:

    def test_rank_two(self):
        A = reference_model().fast
        for t in np.random.default_rng(1).uniform(0, 1, 10):
            assert np.linalg.matrix_rank(A(t)) == 2

    def test_nu0_by_null_space(self):
        from scipy.linalg import null_space
        A0 = reference_model().fast(0.0)
        v = null_space(A0.T)[:, 0]
        npt.assert_allclose(quasi_stationary(reference_model().fast, 0.0), v / v.sum(), atol=1e-13)

    def test_rates(self):
        A = reference_model().fast
        t = 0.6
        a = A(t)
        npt.assert_allclose([a[0, 1], a[1, 2]], [1 + 0.5 * t, 1.0])
        npt.assert_allclose([a[1, 0], a[2, 1]], [1.0, 2 - 0.5 * t])

    def test_json_resolves_to_same_model(self):
        kind, model = resolve_model(reference_model_json())
        assert kind == "chain"
        npt.assert_allclose(model.fast(0.3), reference_model().fast(0.3))
        kind, model = resolve_model(str(CONFIGS / "reference_model.json"))
        npt.assert_allclose(model.slow(0.0), reference_model().slow(0.0))


class TestStatistics:

    def test_normal_cdf_accuracy(self):
        from scipy.stats import norm
        x = np.linspace(-8, 8, 1001)
        assert np.abs(normal_cdf(x) - norm.cdf(x)).max() < 1e-7

    def test_ks_against_scipy(self):
        from scipy.stats import kstest
        z = make_rng(3).standard_normal(500)
        d, p = ks_normal(z)
        ref = kstest(z, "norm", method="exact")
        assert d == pytest.approx(ref.statistic, abs=1e-10)
        assert p == pytest.approx(ref.pvalue, rel=1e-6)

    def test_calibration_self_tests(self):
        c = calibration_checks(10_000, 7)
        assert c["ks_p_value"] > 0.01
        assert c["w1_self"] < 3 * c["w1_noise_scale"]

    def test_ks_rejects_shifted_sample(self):
        z = make_rng(4).standard_normal(5000) + 0.2
        assert ks_normal(z)[1] < 1e-6

    def test_wasserstein_scale(self):
        z = make_rng(5).standard_normal(20_000)
        assert wasserstein_to_normal(z) < 0.03
        assert wasserstein_to_normal(2 * z, 2.0) == pytest.approx(2 * wasserstein_to_normal(z), rel=1e-12)
        assert wasserstein_to_normal(z, 2.0) > 0.5

    def test_slope_fit(self):
        eps = np.array([0.1, 0.05, 0.02, 0.01])
        slope, se = fit_loglog_slope(eps, 3 * eps**2)
        assert slope == pytest.approx(2.0, abs=1e-12) and se < 1e-10
        with pytest.raises(InsufficientResolution):
            fit_loglog_slope(eps[:2], eps[:2])


class TestConfig:

    def test_decreasing_epsilons_required(self):
        with pytest.raises(ValueError):
            ExperimentConfig("clt", epsilons=[0.1, 0.2, 0.05])
        with pytest.raises(ValueError):
            ExperimentConfig("clt", epsilons=[1.5, 0.1])

    def test_statistical_replication_floor(self):
        with pytest.raises(ValueError):
            ExperimentConfig("second_moment", replications=50)
        ExperimentConfig("expansion_error", replications=1)

    def test_unknown_kind_and_keys(self):
        with pytest.raises(ValueError):
            ExperimentConfig("nonsense")
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"kind": "clt", "colour": 1})

    def test_threshold_override_merges(self):
        cfg = ExperimentConfig("clt", thresholds={"min_p_value": 0.05})
        assert cfg.thresholds == {"min_p_value": 0.05, "max_trend_inversions": 1}

    def test_shipped_configs_load(self):
        for path in CONFIGS.glob("*.json"):
            doc = json.loads(path.read_text())
            if "kind" in doc:
                ExperimentConfig.load(path)


class TestExperiments:

    def test_expansion_exact_case(self):
        model = {"fast": PolynomialGenerator.constant([[-1.0, 1.0], [2.0, -2.0]]).to_json(), "T": 1.0}
        rep = run_experiment(ExperimentConfig("expansion_error", model=model, epsilons=[0.1, 0.01], order=0))
        assert rep.passed and rep.extra["exact_case"]
        assert max(r["error"] for r in rep.rows) < 1e-10

    def test_layer_grid(self):
        ts = expansion_error_grid(0.5, 1.0, 0.01)
        assert ts[0] == 0.5 and ts[-1] == 1.0
        assert np.sum(ts < 0.6) >= 19

    def test_second_moment_constant_weights(self):
        cfg = ExperimentConfig("second_moment", weights=[1, 1, 1], epsilons=[0.2, 0.1, 0.05], replications=200)
        rep = run_experiment(cfg)
        assert all(r["deviation"] == 0.0 and r["second_moment"] == 0.0 for r in rep.rows)

    def test_report_self_describing(self, tmp_path):
        cfg = ExperimentConfig("rate_proxy", epsilons=[0.2, 0.1, 0.05], replications=200, seed=5)
        rep = run_experiment(cfg)
        doc = json.loads(rep.to_json())
        assert doc["label"].startswith("PROXY")
        assert doc["thresholds"] == cfg.thresholds
        assert "timings" in doc and "wall" not in json.dumps(strip_timings(doc))
        again = run_experiment(ExperimentConfig.from_dict(doc["config"]))
        assert strip_timings(json.loads(again.to_json())) == strip_timings(doc)
        paths = rep.write(tmp_path)
        assert paths[1].read_text().splitlines()[0] == "epsilon,metric,value,stderr"

    def test_queue_demo_small(self):
        cfg = ExperimentConfig("queue_demo", model=str(CONFIGS / "queue_symmetric.json"), epsilons=[0.05],
                               replications=400, seed=1)
        rep = run_experiment(cfg)
        assert rep.checks["nu_oracle"]
        assert rep.rows[0]["center"] == pytest.approx(0.5, abs=1e-9)


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCli:

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = _run(capsys, "experiment", "--config", str(tmp_path / "missing.json"))
        assert code == 1 and "not found" in err

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["validate"], ["experiment", "--config", "x", "--format", "xml"]])
    def test_usage_errors(self, capsys, argv):
        code, _, err = _run(capsys, *argv)
        assert code == 64 and "config file (JSON)" in err

    def test_validate_reference(self, capsys):
        code, out, _ = _run(capsys, "validate", "--config", str(CONFIGS / "reference_model.json"))
        assert code == 0 and json.loads(out)["valid"]

    def test_validate_broken_generator(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"m0": 2, "terms": [{"coeff": [[-1, 0.5], [1, -1]], "time_poly": [1.0]}]}))
        code, out, _ = _run(capsys, "validate", "--config", str(path))
        assert code == 2 and not json.loads(out)["valid"]

    def test_analyze_writes_series(self, capsys, tmp_path):
        code, out, _ = _run(capsys, "analyze", "--config", str(CONFIGS / "analyze_reference.json"),
                            "--out", str(tmp_path))
        assert code == 0
        doc = json.loads(out)
        assert doc["oracle_deviation"] < 1e-8
        lines = (tmp_path / "variance.csv").read_text().splitlines()
        assert lines[0] == "t,sigma2,cumulative"

    def test_expand(self, capsys, tmp_path):
        code, out, _ = _run(capsys, "expand", "--config", str(CONFIGS / "expansion_order1.json"))
        assert code == 0
        assert json.loads(out)["order"] == 1

    def test_simulate_dumps_paths(self, capsys, tmp_path):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({"model": "reference", "epsilon": 0.1, "replications": 100, "dump_paths": 3}))
        code, out, _ = _run(capsys, "simulate", "--config", str(cfg), "--out", str(tmp_path), "--seed", "8")
        assert code == 0 and json.loads(out)["base_seed"] == 8
        assert (tmp_path / "paths.csv").read_text().startswith("rep,jump_index,time,state")

    def test_threshold_failure_exit_code(self, capsys, tmp_path):
        cfg = tmp_path / "strict.json"
        cfg.write_text(json.dumps({"kind": "rate_proxy", "epsilons": [0.2, 0.1, 0.05], "replications": 100,
                                   "thresholds": {"min_slope": 100.0}}))
        code, _, _ = _run(capsys, "experiment", "--config", str(cfg))
        assert code == 2

    def test_thread_determinism(self, capsys, tmp_path):
        cfg = tmp_path / "det.json"
        cfg.write_text(json.dumps({"kind": "second_moment", "epsilons": [0.2, 0.1, 0.05], "replications": 300}))
        reports = []
        for threads in ("1", "8"):
            out = tmp_path / f"t{threads}"
            _run(capsys, "experiment", "--config", str(cfg), "--threads", threads, "--seed", "77", "--out", str(out))
            reports.append(strip_timings(json.loads((out / "second_moment_report.json").read_text())))
        assert reports[0] == reports[1]

    def test_csv_format(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"kind": "rate_proxy", "epsilons": [0.2, 0.1, 0.05], "replications": 100}))
        _, out, _ = _run(capsys, "experiment", "--config", str(cfg), "--format", "csv")
        assert out.splitlines()[0] == "epsilon,metric,value,stderr"
