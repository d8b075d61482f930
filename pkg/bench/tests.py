import dataclasses
import json
import math
import os
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings, tag

from bench.dataio import (
    BINARY_HEADER,
    BinaryMatrixCodec,
    ConfigError,
    CsvMatrixCodec,
    DataFormatError,
    codec_for_path,
    parse_key_value,
    read_priors,
    read_rows_csv,
)
from bench.harness import TrialResult, aggregate, run_monte_carlo, run_trial
from bench.metrics import (
    NMSE_FLOOR_DB,
    doa_from_theta,
    nmse_frequency,
    nmse_signal,
    theta_from_doa,
)
from bench.models import BenchmarkPoint, BenchmarkRun, TrialRecord
from bench.scenarios import (
    PRESETS,
    ScenarioConfig,
    ScenarioError,
    apply_point,
    build_priors,
    generate_trial,
    preset,
    scenario_from_config,
    sweep_points,
    trial_rng,
)
from estimation.engine import EstimatorFailure, EstimatorOptions
from estimation.model import steering_vector, wrap_distance

FULL_ACCEPTANCE = os.getenv("MVALSE_FULL_ACCEPTANCE", "").lower() in {"1", "true", "yes"}


def _estimate(thetas, concentrations=None):
    thetas = np.asarray(thetas, dtype=float)
    if concentrations is None:
        concentrations = np.ones_like(thetas)
    return SimpleNamespace(thetas=thetas, concentrations=np.asarray(concentrations, dtype=float))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class SignalMetricTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.X = rng.standard_normal((6, 3)) + 1j * rng.standard_normal((6, 3))

    def test_exact_match_hits_floor(self):
        self.assertEqual(nmse_signal(self.X, self.X), NMSE_FLOOR_DB)

    def test_zero_estimate_is_zero_db(self):
        self.assertAlmostEqual(nmse_signal(np.zeros_like(self.X), self.X), 0.0, places=12)

    def test_doubled_estimate_is_zero_db(self):
        self.assertAlmostEqual(nmse_signal(2 * self.X, self.X), 0.0, places=12)

    def test_zero_truth_rejected(self):
        with self.assertRaises(ValueError):
            nmse_signal(self.X, np.zeros_like(self.X))

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ValueError):
            nmse_signal(self.X[:, :2], self.X)


class FrequencyMetricTests(SimpleTestCase):
    def test_exact_match_hits_floor(self):
        self.assertEqual(nmse_frequency(_estimate([0.5, -1.0]), [0.5, -1.0]), NMSE_FLOOR_DB)

    def test_no_estimates_is_zero_db(self):
        self.assertAlmostEqual(nmse_frequency(_estimate([]), [0.5, -1.0, 2.0]), 0.0, places=12)

    def test_matching_ignores_order(self):
        self.assertEqual(nmse_frequency(_estimate([-1.0, 0.5]), [0.5, -1.0]), NMSE_FLOOR_DB)

    def test_zero_padding(self):
        expected = 10 * math.log10(2.0 ** 2 / (0.5 ** 2 + 2.0 ** 2))
        self.assertAlmostEqual(nmse_frequency(_estimate([0.5]), [0.5, 2.0]), expected, places=10)

    def test_keeps_most_concentrated_estimates(self):
        estimate = _estimate([0.5, 1.7, -1.0], concentrations=[100.0, 1.0, 50.0])
        self.assertEqual(nmse_frequency(estimate, [0.5, -1.0]), NMSE_FLOOR_DB)

    def test_wrapped_difference(self):
        truth = [3.1]
        error = (-3.1 + 2 * math.pi) - 3.1
        expected = 10 * math.log10(error ** 2 / 3.1 ** 2)
        self.assertAlmostEqual(nmse_frequency(_estimate([-3.1]), truth), expected, places=8)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            truth = rng.uniform(-np.pi, np.pi, 4)
            est = truth + 0.05 * rng.standard_normal(4)
            kappa = rng.uniform(1, 100, 4)
            base = nmse_frequency(_estimate(est, kappa), truth)
            order = rng.permutation(4)
            self.assertAlmostEqual(nmse_frequency(_estimate(est[order], kappa[order]), truth[rng.permutation(4)]), base)

    def test_close_pairs_match_independently_of_order(self):
        truth = np.array([1.0, 1.01])
        est = np.array([1.02, 1.03])
        expected = 10 * math.log10(((1.02 - 1.0) ** 2 + (1.03 - 1.01) ** 2) / float(np.sum(truth ** 2)))
        self.assertAlmostEqual(nmse_frequency(_estimate(est), truth), expected, places=8)
        self.assertAlmostEqual(nmse_frequency(_estimate(est[::-1]), truth), expected, places=8)
        self.assertAlmostEqual(nmse_frequency(_estimate(est), truth[::-1]), expected, places=8)

    def test_zero_truth_rejected(self):
        with self.assertRaises(ValueError):
            nmse_frequency(_estimate([0.1]), [0.0])

    def test_doa_conversion(self):
        self.assertAlmostEqual(float(doa_from_theta(theta_from_doa(5.0))), 5.0, delta=1e-9)
        self.assertAlmostEqual(float(theta_from_doa(90.0)), math.pi)
        np.testing.assert_allclose(doa_from_theta(theta_from_doa([5.0, 9.0, 70.0])), [5.0, 9.0, 70.0], atol=1e-9)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

class ScenarioGenerationTests(SimpleTestCase):
    def test_exact_snr(self):
        cfg = ScenarioConfig(K=3, M=20, L=4, N=20, snr_db=4.0)
        _, truth = generate_trial(cfg, trial_rng(7, 0))
        self.assertAlmostEqual(truth.snr_db, 4.0, delta=1e-12)

    def test_noise_matches_recorded_snr(self):
        cfg = ScenarioConfig(K=2, M=10, L=3, N=10, snr_db=-3.0)
        measurements, truth = generate_trial(cfg, trial_rng(1, 2))
        U = measurements.Y - truth.X
        realized = 20 * math.log10(np.linalg.norm(truth.X) / np.linalg.norm(U))
        self.assertAlmostEqual(realized, -3.0, delta=1e-9)
        self.assertAlmostEqual(truth.noise_variance, np.linalg.norm(U) ** 2 / U.size)

    def test_infinite_snr_is_noiseless(self):
        cfg = ScenarioConfig(K=2, M=8, L=2, N=10, snr_db=math.inf)
        measurements, truth = generate_trial(cfg, trial_rng(0, 0))
        np.testing.assert_array_equal(measurements.Y, truth.X)
        self.assertEqual(truth.noise_variance, 0.0)

    def test_zero_components_is_pure_noise(self):
        measurements, truth = generate_trial(ScenarioConfig(K=0, M=8, L=3), trial_rng(0, 0))
        self.assertEqual(truth.K, 0)
        self.assertFalse(np.any(truth.X))
        self.assertTrue(np.any(measurements.Y))

    def test_separation_holds(self):
        cfg = ScenarioConfig(K=5, N=20)
        for trial in range(20):
            _, truth = generate_trial(cfg, trial_rng(3, trial))
            for i in range(5):
                for j in range(i + 1, 5):
                    self.assertGreater(wrap_distance(truth.thetas[i], truth.thetas[j]), 2 * math.pi / 20)

    def test_grid_mode_draws_near_grid_means(self):
        cfg = ScenarioConfig(K=3, N=20, frequency_source="von_mises_grid", kappa0=1e4)
        means = cfg.source_means()
        self.assertAlmostEqual(means[0], -19 / 21 * math.pi)
        _, truth = generate_trial(cfg, trial_rng(0, 4))
        for theta in truth.thetas:
            self.assertLess(np.min(wrap_distance(theta, means)), 0.1)

    def test_doa_mode(self):
        cfg, _ = preset("doa")
        _, truth = generate_trial(cfg, trial_rng(0, 0))
        np.testing.assert_allclose(np.sort(truth.thetas), np.sort(theta_from_doa([5.0, 9.0, 70.0])), atol=0.1)
        self.assertTrue(build_priors(cfg).informative)

    def test_streams_are_reproducible(self):
        cfg = ScenarioConfig()
        a, _ = generate_trial(cfg, trial_rng(5, 3))
        b, _ = generate_trial(cfg, trial_rng(5, 3))
        c, _ = generate_trial(cfg, trial_rng(5, 4))
        np.testing.assert_array_equal(a.Y, b.Y)
        self.assertFalse(np.array_equal(a.Y, c.Y))

    def test_rejection_limit(self):
        cfg = ScenarioConfig(K=3, N=20, min_separation=2.08)
        with patch("bench.scenarios.MAX_REJECTIONS", 5):
            with self.assertRaises(ScenarioError):
                generate_trial(cfg, trial_rng(0, 0))

    def test_invalid_configs(self):
        with self.assertRaises(ScenarioError):
            ScenarioConfig(K=21, N=20)
        with self.assertRaises(ScenarioError):
            ScenarioConfig(K=4, min_separation=2.0)
        with self.assertRaises(ScenarioError):
            ScenarioConfig(L=2, groups=3)
        with self.assertRaises(ScenarioError):
            ScenarioConfig(prior="source")

    def test_priors(self):
        self.assertFalse(build_priors(ScenarioConfig()).informative)
        grid = build_priors(ScenarioConfig(prior="grid", kappa0=1e4))
        self.assertEqual(grid.N, 20)
        self.assertAlmostEqual(grid.priors[19].mean_direction, 19 / 21 * math.pi)

    def test_presets_are_valid(self):
        for name, (cfg, sweep) in PRESETS.items():
            for point in sweep_points(sweep):
                apply_point(cfg, point)
        self.assertEqual(PRESETS["order-grid-prior"][1], {"L": [1, 3, 5, 7]})


class ScenarioConfigTests(SimpleTestCase):
    def test_plain_keys_and_sweep(self):
        cfg, sweep = scenario_from_config({"K": "2", "snr_db": "inf", "weight_mean": "1+0.5j",
                                           "sweep.L": "1, 2,4"})
        self.assertEqual(cfg.K, 2)
        self.assertEqual(cfg.snr_db, math.inf)
        self.assertEqual(cfg.weight_mean, 1 + 0.5j)
        self.assertEqual(sweep, {"L": [1, 2, 4]})

    def test_unknown_key_names_the_key(self):
        with self.assertRaises(ConfigError) as ctx:
            scenario_from_config({"bogus": "1"})
        self.assertEqual(ctx.exception.key, "bogus")
        with self.assertRaises(ConfigError) as ctx:
            scenario_from_config({"sweep.doa_degrees": "1,2"})
        self.assertEqual(ctx.exception.key, "sweep.doa_degrees")

    def test_bad_value(self):
        with self.assertRaises(ConfigError) as ctx:
            scenario_from_config({"M": "twenty"})
        self.assertEqual(ctx.exception.key, "M")

    def test_preset_override_drops_swept_field(self):
        cfg, sweep = scenario_from_config({"preset": "order-grid-prior", "L": "3", "trials": "10"})
        self.assertEqual((cfg.L, cfg.trials, cfg.prior), (3, 10, "grid"))
        self.assertEqual(sweep, {})

    def test_unknown_preset(self):
        with self.assertRaises(ConfigError):
            scenario_from_config({"preset": "nope"})

    def test_sweep_points(self):
        self.assertEqual(sweep_points({}), [])
        self.assertEqual(
            sweep_points({"L": [1, 2], "snr_db": [0.0, 5.0]}),
            [{"L": 1, "snr_db": 0.0}, {"L": 1, "snr_db": 5.0}, {"L": 2, "snr_db": 0.0}, {"L": 2, "snr_db": 5.0}],
        )


# ---------------------------------------------------------------------------
# dataio
# ---------------------------------------------------------------------------

class DataIOTests(SimpleTestCase):
    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())
        rng = np.random.default_rng(9)
        self.Y = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def test_csv_round_trip_is_exact(self):
        path = self.tmpdir / "y.csv"
        CsvMatrixCodec().write(path, self.Y)
        np.testing.assert_array_equal(CsvMatrixCodec().read(path), self.Y)

    def test_binary_round_trip_is_exact(self):
        path = self.tmpdir / "y.mvls"
        BinaryMatrixCodec().write(path, self.Y)
        self.assertEqual(path.stat().st_size, BINARY_HEADER.size + 16 * 15)
        np.testing.assert_array_equal(BinaryMatrixCodec().read(path), self.Y)

    def test_format_is_sniffed(self):
        path = self.tmpdir / "data.csv"
        BinaryMatrixCodec().write(path, self.Y)
        self.assertEqual(codec_for_path(path).name, "binary")
        self.assertEqual(codec_for_path(path, sniff=False).name, "csv")
        self.assertEqual(codec_for_path(self.tmpdir / "new.mvls").name, "binary")

    def test_csv_header_must_match_shape(self):
        path = self.tmpdir / "header.csv"
        path.write_text("# note\n# M=3 L=1\n1,2\n3,4\n")
        with self.assertRaises(DataFormatError) as ctx:
            CsvMatrixCodec().read(path)
        self.assertEqual(ctx.exception.line, 2)
        self.assertIn("M=3", str(ctx.exception))
        path.write_text("# M=2 L=2\n1,2\n3,4\n")
        with self.assertRaisesMessage(DataFormatError, "L=2"):
            CsvMatrixCodec().read(path)
        path.write_text("# M=2 L=1\n1,2\n3,4\n")
        np.testing.assert_array_equal(CsvMatrixCodec().read(path), [[1 + 2j], [3 + 4j]])

    def test_csv_errors_carry_line_numbers(self):
        path = self.tmpdir / "bad.csv"
        path.write_text("# header\n1,2,3,4\n1,2,x,4\n")
        with self.assertRaises(DataFormatError) as ctx:
            CsvMatrixCodec().read(path)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn("line 3", str(ctx.exception))
        path.write_text("1,2,3,4\n1,2\n")
        with self.assertRaises(DataFormatError) as ctx:
            CsvMatrixCodec().read(path)
        self.assertEqual(ctx.exception.line, 2)
        path.write_text("1,2,3\n")
        with self.assertRaises(DataFormatError):
            CsvMatrixCodec().read(path)

    def test_binary_errors_carry_offsets(self):
        path = self.tmpdir / "bad.mvls"
        path.write_bytes(b"NOPE" + bytes(10))
        with self.assertRaises(DataFormatError) as ctx:
            BinaryMatrixCodec().read(path)
        self.assertEqual(ctx.exception.offset, 0)
        BinaryMatrixCodec().write(path, self.Y)
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(DataFormatError) as ctx:
            BinaryMatrixCodec().read(path)
        self.assertIsNotNone(ctx.exception.offset)

    def test_key_value_parsing(self):
        entries = parse_key_value(["# comment", "", "K = 3", "name = 'quoted'", "sweep.L = 1,2"])
        self.assertEqual(entries, {"K": "3", "name": "quoted", "sweep.L": "1,2"})
        with self.assertRaises(ConfigError):
            parse_key_value(["no equals sign"])

    def test_prior_file(self):
        path = self.tmpdir / "priors.json"
        path.write_text(json.dumps([{"mean_direction": 0.5, "concentration": 10}, {"mean_direction": 4.0, "concentration": 0}]))
        priors = read_priors(path)
        self.assertEqual(priors[0].concentration, 10.0)
        self.assertAlmostEqual(priors[1].mean_direction, 4.0 - 2 * math.pi)
        path.write_text(json.dumps([{"mean_direction": 0.5}]))
        with self.assertRaises(DataFormatError):
            read_priors(path)


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

class HarnessTests(SimpleTestCase):
    small = ScenarioConfig(name="small", K=2, M=12, L=2, N=10, snr_db=10.0, trials=4, rng_seed=11)

    def test_single_trial_row(self):
        cfg = dataclasses.replace(self.small, trials=1)
        rows = run_monte_carlo(cfg, {"snr_db": [5.0]}, EstimatorOptions(), timing=False)
        result = run_trial(apply_point(cfg, {"snr_db": 5.0}), 0, EstimatorOptions(), timing=False)
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0].results[0].as_row(), result.as_row())
        self.assertEqual(rows[0].nmse_x_db, result.nmse_x_db)
        self.assertEqual(rows[0].p_correct, float(result.order_correct))

    def test_empty_sweep_has_no_rows(self):
        self.assertEqual(run_monte_carlo(self.small, {}, EstimatorOptions()), [])

    def test_worker_count_does_not_change_results(self):
        sweep = {"snr_db": [0.0, 10.0]}
        one = run_monte_carlo(self.small, sweep, EstimatorOptions(), workers=1, timing=False)
        three = run_monte_carlo(self.small, sweep, EstimatorOptions(), workers=3, timing=False)
        self.assertEqual([r.as_row() for r in one], [r.as_row() for r in three])

    def test_aggregation(self):
        results = [
            TrialResult(0, (1.0,), (1.0,), 1, 1, 0.01, 1e-4, 0.5),
            TrialResult(1, (1.0,), (1.0, 2.0), 1, 2, 0.03, 1e-2, 1.5),
            TrialResult(2, (1.0,), (), 1, 0, math.nan, math.nan, 0.2, failed=True, error="boom"),
        ]
        row = aggregate({"L": 4}, results)
        self.assertEqual((row.trials, row.failures), (3, 1))
        self.assertAlmostEqual(row.nmse_x_db, 10 * math.log10(0.02))
        self.assertAlmostEqual(row.nmse_theta_db, 10 * math.log10((1e-4 + 1e-2) / 2))
        self.assertAlmostEqual(row.median_nmse_theta_db, -30.0)
        self.assertEqual((row.p_correct, row.p_over, row.p_under), (0.5, 0.5, 0.0))
        self.assertAlmostEqual(row.runtime, 1.0)
        self.assertEqual(row.as_row()["L"], 4)

    def test_failed_trial_is_recorded(self):
        with patch("bench.harness.run", side_effect=EstimatorFailure("singular", iteration=3)):
            result = run_trial(self.small, 0, EstimatorOptions())
        self.assertTrue(result.failed)
        self.assertIn("iteration 3", result.error)
        self.assertFalse(result.order_correct or result.order_over or result.order_under)

    def test_zero_component_trials_have_no_frequency_error(self):
        cfg = dataclasses.replace(self.small, K=0, trials=2)
        row = run_monte_carlo(cfg, {"L": [2]}, EstimatorOptions(), timing=False)[0]
        self.assertTrue(math.isnan(row.nmse_theta_db))
        self.assertTrue(math.isnan(row.nmse_x_db))

    def test_sequential_trials(self):
        cfg = dataclasses.replace(self.small, L=4, groups=2, trials=2)
        row = run_monte_carlo(cfg, {"groups": [2]}, EstimatorOptions(), timing=False)[0]
        self.assertEqual(row.failures, 0)
        self.assertTrue(math.isfinite(row.nmse_x_db))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

class CommandTests(TestCase):
    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def _config(self, text, name="sweep.cfg"):
        path = self.tmpdir / name
        path.write_text(text)
        return str(path)

    def _bench(self, *args, **kwargs):
        kwargs.setdefault("output_dir", str(self.tmpdir / "out"))
        kwargs.setdefault("stdout", StringIO())
        call_command("bench", *args, **kwargs)
        return Path(kwargs["output_dir"])

    def test_simulate_writes_data_and_sidecar(self):
        out = self.tmpdir / "trial.csv"
        call_command("simulate", str(out), preset="snr-sweep", seed=3, trial=2, stdout=StringIO())
        cfg, _ = preset("snr-sweep")
        expected, truth = generate_trial(dataclasses.replace(cfg, rng_seed=3), trial_rng(3, 2), trial=2)
        np.testing.assert_array_equal(CsvMatrixCodec().read(out), expected.Y)
        sidecar = json.loads((self.tmpdir / "trial.csv.truth.json").read_text())
        self.assertEqual((sidecar["M"], sidecar["L"], sidecar["seed"]), (cfg.M, cfg.L, 3))
        self.assertAlmostEqual(sidecar["snr_db"], cfg.snr_db, delta=1e-12)
        np.testing.assert_allclose(sidecar["thetas"], truth.thetas)

    def test_simulate_binary_and_pure_noise(self):
        out = self.tmpdir / "noise.mvls"
        call_command("simulate", self._config("K = 0\nM = 8\nL = 3\n", "noise.cfg"), str(out), stdout=StringIO())
        Y = codec_for_path(out).read(out)
        self.assertEqual(Y.shape, (8, 3))
        self.assertTrue(np.any(Y))
        self.assertEqual(json.loads((self.tmpdir / "noise.mvls.truth.json").read_text())["K"], 0)

    def test_estimate_zero_matrix(self):
        path = self.tmpdir / "zeros.csv"
        CsvMatrixCodec().write(path, np.zeros((8, 2)))
        report_path = self.tmpdir / "report.json"
        call_command("estimate", str(path), output=str(report_path), stdout=StringIO())
        report = json.loads(report_path.read_text())
        self.assertEqual(report["K_hat"], 0)
        self.assertEqual(report["thetas"], [])
        self.assertEqual(report["units"]["thetas"], "rad")

    def test_estimate_reads_simulated_file(self):
        out = self.tmpdir / "sim.mvls"
        call_command("simulate", str(out), preset="high-snr", seed=1, stdout=StringIO())
        stdout = StringIO()
        call_command("estimate", str(out), prior="grid", kappa0=1.0, workers=2, stdout=stdout)
        report = json.loads(stdout.getvalue())
        self.assertEqual((report["M"], report["L"], report["N"]), (20, 8, 20))
        self.assertGreaterEqual(report["K_hat"], 1)
        self.assertEqual(len(report["weights"]), report["K_hat"])

    def test_estimate_doa(self):
        rng = np.random.default_rng(4)
        theta = float(theta_from_doa(5.0))
        X = np.outer(steering_vector(theta, 20), 1.0 + 0.1 * rng.standard_normal(4))
        U = 1e-3 * (rng.standard_normal((20, 4)) + 1j * rng.standard_normal((20, 4)))
        path = self.tmpdir / "doa.csv"
        CsvMatrixCodec().write(path, X + U)
        stdout = StringIO()
        call_command("estimate", str(path), doa=True, groups=2, stdout=stdout)
        report = json.loads(stdout.getvalue())
        self.assertEqual(report["K_hat"], 1)
        self.assertAlmostEqual(report["doa_degrees"][0], 5.0, delta=0.05)
        self.assertEqual(report["doa_degrees"], [float(d) for d in doa_from_theta(report["thetas"])])
        self.assertEqual(report["units"]["doa_degrees"], "deg")

    def test_estimate_malformed_file(self):
        path = self.tmpdir / "bad.csv"
        path.write_text("1,2\n3\n")
        with self.assertRaisesMessage(CommandError, "line 2"):
            call_command("estimate", str(path), stdout=StringIO())

    def test_estimate_prior_file_required(self):
        path = self.tmpdir / "y.csv"
        CsvMatrixCodec().write(path, np.ones((4, 1)))
        with self.assertRaises(CommandError):
            call_command("estimate", str(path), prior="file", stdout=StringIO())

    def test_estimate_failure_exits_nonzero(self):
        path = self.tmpdir / "y.csv"
        CsvMatrixCodec().write(path, np.ones((4, 1)))
        with patch("bench.management.commands.estimate.run", side_effect=EstimatorFailure("singular", iteration=2)):
            with self.assertRaisesMessage(CommandError, "iteration 2"):
                call_command("estimate", str(path), stdout=StringIO())

    def test_bench_empty_sweep_writes_header_only(self):
        out = self._bench(self._config("name = empty\nK = 1\n"))
        lines = (out / "empty.csv").read_text().splitlines()
        self.assertEqual(lines, ["trials,failures,nmse_x_db,nmse_theta_db,median_nmse_theta_db,p_correct,p_over,p_under,runtime"])

    def test_bench_invalid_key(self):
        with self.assertRaisesMessage(CommandError, "bogus"):
            self._bench(self._config("bogus = 1\n"))

    def test_bench_needs_a_scenario(self):
        with self.assertRaises(CommandError):
            self._bench()

    def test_bench_is_deterministic(self):
        config = self._config("preset = snr-sweep\nname = det\nM = 12\nN = 10\ntrials = 3\nsweep.snr_db = 0, 10\n")
        first = self._bench(config, output_dir=str(self.tmpdir / "a"), no_timing=True, per_trial=True, workers=1)
        second = self._bench(config, output_dir=str(self.tmpdir / "b"), no_timing=True, per_trial=True, workers=3)
        repeat = self._bench(config, output_dir=str(self.tmpdir / "c"), no_timing=True, per_trial=True, workers=1)
        for name in ("det.csv", "det.json", "det.trials.csv"):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)
            self.assertEqual((first / name).read_bytes(), (repeat / name).read_bytes(), name)
        rows = read_rows_csv(first / "det.csv")
        self.assertEqual([row["snr_db"] for row in rows], ["0.0", "10.0"])
        self.assertEqual(len(read_rows_csv(first / "det.trials.csv")), 6)
        meta = json.loads((first / "det.json").read_text())
        self.assertEqual(meta["seed"], 0)
        self.assertIn("Philox", meta["rng"])

    def test_order_preset_columns(self):
        out = self._bench(preset="order-grid-prior", trials=1, no_timing=True, max_iterations=5)
        rows = read_rows_csv(out / "order-grid-prior.csv")
        self.assertEqual([row["L"] for row in rows], ["1", "3", "5", "7"])
        for row in rows:
            self.assertIn(row["p_over"], {"0.0", "1.0"})
            self.assertIn("p_under", row)

    @override_settings(BENCH_DEFAULT_SEED=42)
    def test_bench_saves_to_database(self):
        config = self._config("name = saved\nK = 1\nM = 8\nN = 6\ntrials = 2\nsweep.L = 1, 2\n")
        self._bench(config, save=True, per_trial=True, no_timing=True, workers=1)
        run = BenchmarkRun.objects.get()
        self.assertEqual((run.name, run.trials), ("saved", 2))
        self.assertEqual(BenchmarkPoint.objects.filter(run=run).count(), 2)
        self.assertEqual(TrialRecord.objects.filter(point__run=run).count(), 4)
        self.assertEqual(list(run.points.values_list("values", flat=True)), [{"L": 1}, {"L": 2}])


# ---------------------------------------------------------------------------
# acceptance runs
# ---------------------------------------------------------------------------

@tag("slow")
class AcceptanceTests(SimpleTestCase):
    def _rows(self, name, trials, sweep=None, **changes):
        cfg, preset_sweep = preset(name)
        cfg = dataclasses.replace(cfg, trials=trials, rng_seed=2024, **changes)
        return run_monte_carlo(cfg, preset_sweep if sweep is None else sweep, EstimatorOptions(),
                               workers=4, timing=False)

    def test_grid_prior_overestimation(self):
        rows = self._rows("order-grid-prior", 1000 if FULL_ACCEPTANCE else 200, sweep={"L": [1, 5, 7]})
        by_L = {row.point["L"]: row for row in rows}
        self.assertLessEqual(by_L[7].p_over, 0.02)
        self.assertLessEqual(by_L[5].p_over, 0.05)
        self.assertGreaterEqual(by_L[1].p_over, 0.15)

    def test_high_snr_recovery(self):
        row = self._rows("high-snr", 200)[0]
        self.assertGreaterEqual(row.p_correct, 0.9)
        self.assertLessEqual(row.median_nmse_theta_db, -45.0)

    def test_signal_error_falls_with_snr(self):
        rows = self._rows("snr-sweep", 200)
        values = [row.nmse_x_db for row in rows]
        self.assertTrue(all(b <= a for a, b in zip(values, values[1:])), values)

    def test_signal_error_falls_with_snapshots(self):
        rows = self._rows("snapshots-m20", 200)
        values = [row.nmse_x_db for row in rows]
        self.assertTrue(all(b <= a for a, b in zip(values, values[1:])), values)

    def test_informative_prior_helps(self):
        rows = self._rows("prior-benefit", 200)
        by_prior = {row.point["prior"]: row for row in rows}
        self.assertLess(by_prior["grid"].nmse_theta_db, by_prior["none"].nmse_theta_db)

    def test_grouping_never_beats_batch(self):
        rows = self._rows("seq-snr", 200)
        by_groups = {}
        for row in rows:
            by_groups.setdefault(row.point["groups"], []).append(row.nmse_x_db)
        average = {groups: sum(values) / len(values) for groups, values in by_groups.items()}
        self.assertGreaterEqual(average[4], average[1], average)
        self.assertGreaterEqual(average[8], average[1], average)
