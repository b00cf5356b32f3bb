import sys
import tempfile
import unittest
from pathlib import Path

from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import config
from analysis import (
    REGIMES,
    FrontierPoint,
    MetricsSummary,
    acceptance_checks,
    build_frontier,
    compare_policies,
    get_regime,
    lowest_budget_intervals,
    peak_efficiency,
    regime_frontier,
    regime_points,
    render_markdown,
    scaling_study,
    slice_result,
    summarize,
    summary_dict,
    verify_dominance,
    write_frontier,
)
from cluster_sim import NodeLog, SimResult
from errors import ConfigError, DataError
from perf_model import OperatingPoint, load_gpu_spec, load_registry

SPEC = load_gpu_spec()
REGISTRY = load_registry(config.PROFILE_DIR, SPEC)


def fp(throughput, efficiency, cap=300.0, batch=8):
    return FrontierPoint(OperatingPoint(cap, batch), throughput, efficiency)


def fake_result(tokens, budgets=None, target=150.0, interval=0.5, power=1000.0):
    telemetry = [
        {"t": (k + 1) * interval, "tokens": n, "throughput": n / interval, "system_power": power, "target": target}
        for k, n in enumerate(tokens)
    ]
    decisions = [{"t": row["t"], "applied": int(k == 0)} for k, row in enumerate(telemetry)]
    budgets = budgets or [None] * len(tokens)
    budget_log = [
        {"t": k * interval, "cluster_budget": "" if b is None else b, "node_budgets": ""}
        for k, b in enumerate(budgets)
    ]
    log = NodeLog("qwen", "Qwen1.5-MoE", target, (4, 4, 1), telemetry=telemetry, decisions=decisions)
    return SimResult("unit", "pals", interval, len(tokens) * interval, [log], budget_log, "abc", "cfg")


class FrontierTests(unittest.TestCase):
    def test_single_point_is_its_own_frontier(self):
        only = fp(10.0, 1.0)
        self.assertEqual(build_frontier([only]), [only])

    def test_dominated_points_are_dropped(self):
        a, b, c = fp(10.0, 2.0), fp(20.0, 1.0), fp(9.0, 0.5)
        self.assertEqual(build_frontier([c, b, a]), [a, b])

    def test_equal_points_collapse_to_the_lower_cap(self):
        frontier = build_frontier([fp(10.0, 1.0, cap=350.0), fp(10.0, 1.0, cap=250.0)])
        self.assertEqual(len(frontier), 1)
        self.assertEqual(frontier[0].point.power_cap, 250.0)

    def test_non_positive_metrics_rejected(self):
        with self.assertRaises(DataError):
            fp(0.0, 1.0)
        with self.assertRaises(DataError):
            peak_efficiency([])

    @settings(max_examples=300, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(min_value=1.0, max_value=1e4), st.floats(min_value=0.01, max_value=10.0)),
            min_size=1,
            max_size=40,
        )
    )
    def test_frontier_is_complete_and_minimal(self, pairs):
        points = [fp(t, e, batch=i + 1) for i, (t, e) in enumerate(pairs)]
        frontier = build_frontier(points)

        for p in points:
            self.assertTrue(any(q.covers(p) for q in frontier))
        for q in frontier:
            self.assertFalse(any(p.dominates(q) for p in points))
        throughputs = [q.throughput for q in frontier]
        self.assertEqual(throughputs, sorted(throughputs))

    def test_write_frontier(self):
        frontier = regime_frontier("hw-only", REGISTRY["Qwen1.5-MoE"], SPEC)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_frontier(frontier, Path(tmp) / "hw-only.csv")
            lines = path.read_text().splitlines()
        self.assertEqual(lines[0], "power_cap,batch_size,tp,ep,dp,throughput,efficiency")
        self.assertEqual(len(lines), len(frontier) + 1)


class RegimeTests(unittest.TestCase):
    def test_presets(self):
        self.assertEqual(sorted(REGIMES), ["hw+sw", "hw-only", "joint", "sw-only"])
        with self.assertRaises(ConfigError) as ctx:
            get_regime("sw+hw")
        self.assertIn("hw+sw", str(ctx.exception))

    def test_regime_point_counts(self):
        qwen = REGISTRY["Qwen1.5-MoE"]
        self.assertEqual(len(regime_points(get_regime("hw-only"), qwen)), 6)
        self.assertEqual(len(regime_points(get_regime("sw-only"), qwen)), 18)
        self.assertEqual(len(regime_points(get_regime("joint"), qwen)), 108)
        self.assertTrue(all(p.tp == 4 for p in regime_points(get_regime("hw+sw"), qwen)))

    def test_joint_frontier_covers_every_other_regime(self):
        for name in ("Mixtral-8x7B", "Qwen1.5-MoE", "OLMoE-1B-7B"):
            profile = REGISTRY[name]
            joint = regime_frontier("joint", profile, SPEC)
            for other in ("sw-only", "hw-only", "hw+sw"):
                with self.subTest(profile=name, regime=other):
                    ok, witnesses = verify_dominance(joint, regime_frontier(other, profile, SPEC))
                    self.assertTrue(ok)
                    self.assertEqual(witnesses, [])

    def test_hardware_and_software_knobs_complement_each_other(self):
        for name in ("Qwen1.5-MoE", "OLMoE-1B-7B"):
            profile = REGISTRY[name]
            hw = regime_frontier("hw-only", profile, SPEC)
            sw = regime_frontier("sw-only", profile, SPEC)
            with self.subTest(profile=name):
                self.assertFalse(verify_dominance(hw, sw)[0])
                self.assertFalse(verify_dominance(sw, hw)[0])

    def test_compute_bound_profile_gains_nothing_from_software_knobs_alone(self):
        profile = REGISTRY["Mixtral-8x7B"]
        hw = regime_frontier("hw-only", profile, SPEC)
        sw = regime_frontier("sw-only", profile, SPEC)
        self.assertEqual(verify_dominance(hw, sw), (True, []))
        self.assertFalse(verify_dominance(sw, hw)[0])

    def test_joint_peak_efficiency_gain_over_software_only(self):
        expected = {"Mixtral-8x7B": 1.18, "Qwen1.5-MoE": 1.13, "OLMoE-1B-7B": 1.14}
        for name, ratio in expected.items():
            profile = REGISTRY[name]
            measured = peak_efficiency(regime_frontier("joint", profile, SPEC)) / peak_efficiency(
                regime_frontier("sw-only", profile, SPEC)
            )
            with self.subTest(profile=name):
                self.assertAlmostEqual(measured, ratio, delta=0.05)

    def test_all_acceptance_checks_pass(self):
        checks = acceptance_checks(REGISTRY, SPEC)
        self.assertEqual(len(checks), 21)
        failed = [(c.name, c.subject, c.value) for c in checks if not c.passed]
        self.assertEqual(failed, [])

    def test_scaling_study(self):
        rows = scaling_study(REGISTRY["Qwen1.5-MoE"], SPEC)
        self.assertEqual([r["dp"] for r in rows], [1, 2, 3])
        self.assertEqual(rows[0]["efficiency_ratio"], 1.0)
        self.assertAlmostEqual(rows[-1]["efficiency_ratio"], 0.70, delta=0.05)


class SummaryTests(unittest.TestCase):
    def test_run_metrics(self):
        result = fake_result([100, 100, 0, 100], budgets=[1100.0] * 4)
        summary = summarize(result)

        self.assertEqual(summary.total_tokens, 300)
        self.assertAlmostEqual(summary.total_energy, 2000.0)
        self.assertAlmostEqual(summary.tokens_per_joule, 0.15)
        self.assertAlmostEqual(summary.qos_violation_rate, 0.25)
        self.assertAlmostEqual(summary.power_tracking_mae, 100.0)
        self.assertAlmostEqual(summary.mean_throughput, 150.0)
        self.assertEqual(summary.budget_exceeded, 0.0)

    def test_share_of_intervals_over_budget(self):
        summary = summarize(fake_result([100, 100, 100, 100], budgets=[900.0, 1100.0, None, 950.0]))
        self.assertAlmostEqual(summary.budget_exceeded, 2 / 3)
        self.assertIsNone(summarize(fake_result([100, 100])).budget_exceeded)

    def test_summaries_written_before_the_overshoot_field_still_load(self):
        data = summarize(fake_result([100, 100])).to_dict()
        del data["budget_exceeded"]
        self.assertIsNone(MetricsSummary.from_dict(data).budget_exceeded)

    def test_unbudgeted_run_has_no_tracking_error(self):
        summary = summarize(fake_result([100, 100]))
        self.assertIsNone(summary.power_tracking_mae)
        self.assertEqual(summary.qos_violation_rate, 0.0)

    def test_idle_run(self):
        summary = summarize(fake_result([0, 0, 0], target=10.0))
        self.assertEqual(summary.tokens_per_joule, 0.0)
        self.assertEqual(summary.qos_violation_rate, 1.0)

    def test_empty_run_is_a_data_error(self):
        with self.assertRaises(DataError):
            summarize(fake_result([]))

    def test_slices_add_up(self):
        result = fake_result([100, 80, 0, 120, 60, 90])
        whole = summarize(result)
        first = summarize(slice_result(result, 0, 2))
        rest = summarize(slice_result(result, 2, 6))
        self.assertEqual(first.total_tokens + rest.total_tokens, whole.total_tokens)
        self.assertAlmostEqual(first.total_energy + rest.total_energy, whole.total_energy)

    def test_lowest_budget_quartile(self):
        result = fake_result([100] * 4, budgets=[4200.0, 3555.0, 3900.0, 3555.0])
        self.assertEqual(lowest_budget_intervals(result, 0.5), [1, 3])
        self.assertEqual(lowest_budget_intervals(fake_result([100])), [])

    def test_summary_dict_blocks(self):
        data = summary_dict(fake_result([100, 100]))
        self.assertEqual(data["policy"], "pals")
        self.assertEqual(data["nodes"]["qwen"]["reconfigurations"], 1)
        self.assertEqual(data["nodes"]["qwen"]["model"], "Qwen1.5-MoE")
        self.assertEqual(MetricsSummary.from_dict(data["cluster"]).total_tokens, 200)

    def test_summary_validation(self):
        with self.assertRaises(DataError):
            MetricsSummary.from_dict({"tokens_per_joule": 1.0})
        with self.assertRaises(DataError):
            MetricsSummary(1.0, 1.5, None, 1, 1.0, 1, 1.0)


class ComparisonTests(unittest.TestCase):
    def summaries(self, **values):
        return {name: MetricsSummary(v, 0.0, None, 100, 100.0 / v, 10, 50.0) for name, v in values.items()}

    def test_normalization_and_headroom(self):
        rows = compare_policies(self.summaries(fixed=0.1, pals=0.15, oracle=0.2))
        by_policy = {row["policy"]: row for row in rows}
        self.assertAlmostEqual(by_policy["pals"]["normalized"], 1.5)
        self.assertAlmostEqual(by_policy["pals"]["headroom"], 0.5)
        self.assertAlmostEqual(by_policy["oracle"]["headroom"], 1.0)

    def test_headroom_needs_the_oracle(self):
        rows = compare_policies(self.summaries(fixed=0.1, pals=0.15))
        self.assertTrue(all(row["headroom"] is None for row in rows))

    def test_markdown_table(self):
        text = render_markdown(compare_policies(self.summaries(fixed=0.1, pals=0.15, oracle=0.2)))
        self.assertIn("| pals | 0.1500 | 1.500x | 0.50 | 0.000 | 50.0 | - |", text)
        self.assertTrue(text.startswith("## Policy comparison"))


if __name__ == "__main__":
    unittest.main()
