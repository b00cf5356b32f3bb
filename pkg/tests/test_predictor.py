import json
import random
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import config
from errors import ConfigError, DataError
from perf_model import AnalyticModel, OperatingPoint, load_gpu_spec, load_registry
from predictor import (
    FeatureVector,
    Hyperparams,
    RegressionTree,
    encode_points,
    evaluate_mape,
    evaluate_mape_by_model,
    feature_importance,
    feature_names,
    load_model,
    predict,
    save_model,
    train,
)
from profiler import ProfilingRecord, SimulatedBackend, SweepGrid, merge_datasets, run_sweep, split_holdout

SPEC = load_gpu_spec()
REGISTRY = load_registry(config.PROFILE_DIR, SPEC)
SMALL = Hyperparams(n_trees=10, max_depth=12, min_leaf=2)


def sweep(names, grid=None, sigma=config.NOISE_SIGMA, seed=0):
    backend = SimulatedBackend(SPEC, sigma=sigma, sys_sigma=sigma / 2)
    return merge_datasets(
        [run_sweep(grid or SweepGrid(), REGISTRY[name], backend, noise_seed=seed) for name in names]
    ).records


class EncodingTests(unittest.TestCase):
    def test_feature_names_end_with_model_one_hot(self):
        names = feature_names(["A", "B"])
        self.assertEqual(names[:6], ("power_cap", "batch_size", "tp", "ep", "dp", "batch_per_tp"))
        self.assertEqual(names[6:], ("model=A", "model=B"))

    def test_encoding_row(self):
        row = encode_points(["A", "B"], "B", [OperatingPoint(300.0, 64, 4, 4, 1)])[0]
        np.testing.assert_array_equal(row, [300.0, 64, 4, 4, 1, 16.0, 0.0, 1.0])

    def test_unknown_model_id_is_a_data_error(self):
        with self.assertRaises(DataError):
            encode_points(["A"], "C", [OperatingPoint(300.0, 8)])


class HyperparamTests(unittest.TestCase):
    def test_defaults_follow_config(self):
        self.assertEqual(Hyperparams().to_dict(), {"n_trees": 100, "max_depth": 12, "min_leaf": 2})

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigError):
            Hyperparams.from_dict({"n_estimators": 10})

    def test_non_positive_values_rejected(self):
        with self.assertRaises(ConfigError):
            Hyperparams(n_trees=0)


class TrainTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.records = sweep(["Qwen1.5-MoE"], SweepGrid(eps=(4,)))

    def test_empty_dataset_is_a_data_error(self):
        with self.assertRaises(DataError):
            train([], SMALL)

    def test_unknown_target_rejected(self):
        with self.assertRaises(ConfigError):
            train(self.records, SMALL, targets=("latency",))

    def test_result_does_not_depend_on_record_order(self):
        shuffled = list(self.records)
        random.Random(4).shuffle(shuffled)
        points = [r.point for r in self.records[:40]]
        a = train(self.records, SMALL, seed=2).predict_many("Qwen1.5-MoE", points)
        b = train(shuffled, SMALL, seed=2).predict_many("Qwen1.5-MoE", points)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_constant_target_gives_constant_prediction(self):
        flat = [
            ProfilingRecord(r.point, r.model, 100.0, 200.0, 1185.0, r.duration) for r in self.records[:50]
        ]
        model = train(flat, SMALL)
        tput, power = model.predict_many("Qwen1.5-MoE", [r.point for r in self.records[50:80]])
        np.testing.assert_allclose(tput, 100.0)
        np.testing.assert_allclose(power, 200.0)
        self.assertTrue(all(tree.n_nodes == 1 for tree in model.forests["throughput"]))

    def test_batch_size_ranks_first_for_efficiency(self):
        model = train(self.records, Hyperparams(n_trees=20), targets=("efficiency",))
        ranking = feature_importance(model, "efficiency")

        self.assertEqual(ranking[0][0], "batch_size")
        self.assertAlmostEqual(sum(score for _, score in ranking), 1.0)

    def test_importance_needs_the_efficiency_forest(self):
        model = train(self.records[:100], SMALL)
        with self.assertRaises(DataError):
            feature_importance(model, "efficiency")

    def test_point_prediction_derives_efficiency(self):
        model = train(self.records, SMALL)
        point = OperatingPoint(200.0, 64, 4, 4, 1)
        result = predict(model, FeatureVector("Qwen1.5-MoE", point))
        sys_power = 1.05 * 4 * result.power_hat + 345.0
        self.assertAlmostEqual(result.efficiency_hat, result.throughput_hat / sys_power)


class AccuracyTests(unittest.TestCase):
    def test_noiseless_grid_interpolates_within_three_percent(self):
        records = sweep(["Qwen1.5-MoE"], sigma=0.0)
        train_records, heldout = split_holdout(records, 0.2, seed=0)
        model = train(train_records, SMALL)

        tput_mape, power_mape = evaluate_mape(model, heldout)
        self.assertLessEqual(tput_mape, 0.03)
        self.assertLessEqual(power_mape, 0.03)

    def test_noisy_pooled_grid_meets_accuracy_targets(self):
        records = sweep(["Qwen1.5-MoE", "Mixtral-8x7B"])
        train_records, heldout = split_holdout(records, 0.2, seed=0)
        model = train(train_records, Hyperparams(n_trees=20))

        tput_mape, power_mape = evaluate_mape(model, heldout)
        self.assertLessEqual(tput_mape, 0.07)
        self.assertLessEqual(power_mape, 0.05)
        self.assertEqual(sorted(evaluate_mape_by_model(model, heldout)), ["Mixtral-8x7B", "Qwen1.5-MoE"])

    def test_analytic_model_scores_zero_on_noiseless_records(self):
        records = sweep(["GPT-2"], SweepGrid(caps=(200, 300), batches=(1, 8), tps=(1,), eps=(1,), dps=(1,)), sigma=0.0)
        tput_mape, power_mape = evaluate_mape(AnalyticModel(REGISTRY, SPEC), records)
        self.assertAlmostEqual(tput_mape, 0.0)
        self.assertAlmostEqual(power_mape, 0.0)

    def test_empty_holdout_is_a_data_error(self):
        with self.assertRaises(DataError):
            evaluate_mape(AnalyticModel(REGISTRY, SPEC), [])


class ModelFileTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        grid = SweepGrid(caps=(200, 300, 400), batches=(1, 8, 64), tps=(4,), eps=(4,), dps=(1, 2))
        cls.records = sweep(["Qwen1.5-MoE", "OLMoE-1B-7B"], grid)
        cls.model = train(cls.records, SMALL, targets=("throughput", "gpu_power", "efficiency"))

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_loaded_model_predicts_identically(self):
        path = save_model(self.model, Path(self.tmp.name) / "model.json")
        loaded = load_model(path)
        points = [r.point for r in self.records]
        for model_id in ("Qwen1.5-MoE", "OLMoE-1B-7B"):
            a = self.model.predict_many(model_id, points)
            b = loaded.predict_many(model_id, points)
            np.testing.assert_array_equal(a[0], b[0])
            np.testing.assert_array_equal(a[1], b[1])
        self.assertEqual(feature_importance(loaded), feature_importance(self.model))

    def test_saving_is_byte_stable(self):
        a = save_model(self.model, Path(self.tmp.name) / "a.json")
        b = save_model(train(self.records, SMALL, targets=("throughput", "gpu_power", "efficiency")), Path(self.tmp.name) / "b.json")
        self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_version_mismatch_is_a_data_error(self):
        path = save_model(self.model, Path(self.tmp.name) / "model.json")
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with self.assertRaises(DataError):
            load_model(path)

    def test_missing_file_is_a_data_error(self):
        with self.assertRaises(DataError):
            load_model(Path(self.tmp.name) / "absent.json")

    def test_unknown_model_at_prediction_time(self):
        with self.assertRaises(DataError):
            self.model.predict_many("Mixtral-8x7B", [OperatingPoint(300.0, 8, 4, 8, 1)])

    def test_tree_arrays_must_line_up(self):
        with self.assertRaises(DataError):
            RegressionTree.from_dict(
                {"feature": [-1], "threshold": [0.0, 1.0], "left": [-1], "right": [-1], "value": [1.0], "depth": 0}
            )


if __name__ == "__main__":
    unittest.main()
