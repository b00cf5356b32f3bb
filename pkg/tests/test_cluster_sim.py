import json
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import MagicMock

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import config
from analysis import summarize
from cluster_sim import (
    Actuator,
    CachedPredictor,
    NodeArrivals,
    NodeSim,
    NodeSpec,
    Scenario,
    effective_batch,
    generate_arrivals,
    load_scenario,
    node_caps,
    run,
    run_baseline_suite,
    write_result,
)
from controller import REASON_EXHAUSTIVE
from errors import ConfigError, SimulationError
from perf_model import (
    AnalyticModel,
    OperatingPoint,
    SystemPowerCoeffs,
    evaluate,
    load_gpu_spec,
    load_registry,
    throughput,
)

SPEC = load_gpu_spec()
REGISTRY = load_registry(config.PROFILE_DIR, SPEC)
ANALYTIC = AnalyticModel(REGISTRY, SPEC)
SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"


def scenario(**overrides):
    data = {
        "name": "unit",
        "duration": 5,
        "seed": 3,
        "nodes": [{"model": "Qwen1.5-MoE", "qos_fraction": 0.9, "label": "qwen"}],
    }
    data.update(overrides)
    return Scenario.from_dict(data)


class ScenarioParsingTests(unittest.TestCase):
    def test_shipped_scenarios_load(self):
        single = load_scenario(SCENARIO_DIR / "single_node_qwen.json")
        multi = load_scenario(SCENARIO_DIR / "multi_node_qos.json")
        dr = load_scenario(SCENARIO_DIR / "demand_response.json")

        self.assertEqual(len(single.nodes), 1)
        self.assertEqual(multi.cluster_budget, 4800.0)
        self.assertEqual([n.label for n in multi.nodes], ["deepseek", "mixtral", "olmoe"])
        self.assertEqual([n.dp for n in multi.nodes], [2, None, 2])
        self.assertEqual(multi.predictor_grid.dps, (1, 2))
        self.assertEqual(dr.budget_trace.watts, (3900.0, 3600.0, 3700.0, 3600.0))
        self.assertTrue(dr.tracking)
        self.assertFalse(multi.tracking)
        self.assertEqual(dr.predictor_grid.dps, (1,))
        self.assertEqual(single.steps, int(single.duration / 0.5))

    def test_missing_duration(self):
        with self.assertRaises(ConfigError):
            Scenario.from_dict({"nodes": [{"model": "GPT-2"}]})

    def test_unknown_policy(self):
        with self.assertRaises(ConfigError):
            scenario(policy="round-robin")

    def test_budget_and_trace_are_exclusive(self):
        with self.assertRaises(ConfigError):
            Scenario.from_dict(
                {
                    "duration": 10,
                    "nodes": [{"model": "GPT-2"}],
                    "cluster_budget": 4000,
                    "budget_trace": "demand_response_trace.csv",
                },
                base_dir=SCENARIO_DIR,
            )

    def test_unknown_seq_len_preset(self):
        with self.assertRaises(ConfigError):
            scenario(seq_len="medium")

    def test_bad_qos_fraction(self):
        with self.assertRaises(ConfigError):
            NodeSpec("GPT-2", qos_fraction=1.5)

    def test_missing_scenario_file(self):
        with self.assertRaises(ConfigError):
            load_scenario("/nonexistent/scenario.json")

    def test_unregistered_model_fails_before_running(self):
        with self.assertRaises(ConfigError):
            run(scenario(nodes=[{"model": "Falcon-40B"}]), ANALYTIC, REGISTRY, SPEC)

    def test_config_hash_tracks_the_source(self):
        self.assertEqual(scenario().config_hash(), scenario().config_hash())
        self.assertNotEqual(scenario().config_hash(), scenario(seed=4).config_hash())


class BuildingBlockTests(unittest.TestCase):
    def test_effective_batch(self):
        self.assertEqual(effective_batch(queue_depth=100, running=10, batch_cap=64), 64)
        self.assertEqual(effective_batch(queue_depth=3, running=10, batch_cap=64), 13)
        with self.assertRaises(ConfigError):
            effective_batch(-1, 0, 8)

    def test_cap_changes_land_after_the_actuation_latency(self):
        act = Actuator(cap=400.0, batch_cap=64)
        act.request(OperatingPoint(200.0, 8), interval_index=3)
        self.assertEqual(act.batch_cap, 8)
        act.tick(3)
        self.assertEqual(act.cap, 400.0)
        act.tick(4)
        self.assertEqual(act.cap, 200.0)
        self.assertTrue(act.settled)

        slow = Actuator(cap=400.0, batch_cap=64, latency=2)
        slow.request(OperatingPoint(250.0, 64), interval_index=3)
        slow.tick(4)
        self.assertEqual(slow.cap, 400.0)
        self.assertFalse(slow.settled)
        slow.tick(5)
        self.assertEqual(slow.cap, 250.0)

    def test_runtime_caps_start_at_the_floor_breakpoint(self):
        s = scenario()
        self.assertEqual(node_caps(s, REGISTRY["Mixtral-8x7B"], SPEC), [250.0, 300.0, 350.0, 400.0])

    def test_arrivals_depend_only_on_seed_and_node(self):
        s = scenario()
        a = generate_arrivals(s, 0, 20.0)
        b = generate_arrivals(s, 0, 20.0)
        c = generate_arrivals(s, 1, 20.0)
        self.assertEqual(a.digest(), b.digest())
        self.assertNotEqual(a.digest(), c.digest())
        self.assertEqual(len(a.lengths), int(a.counts.sum()))


def node_sim(requests: int, length: int = 5000, intervals: int = 10, model: str = "Qwen1.5-MoE") -> NodeSim:
    profile = REGISTRY[model]
    counts = np.zeros(intervals, dtype=np.int64)
    counts[0] = requests
    arrivals = NodeArrivals(counts=counts, lengths=np.full(requests, length, dtype=np.int64))
    deployment = (profile.deployment_tp, profile.deployment_ep, profile.deployment_dp)
    return NodeSim(profile, SPEC, deployment, arrivals, 0.5)


class NodeSimTests(unittest.TestCase):
    def test_lowering_the_batch_cap_preempts_the_newest_sequences(self):
        sim = node_sim(100)
        first = sim.advance(0, 400.0, 64)
        self.assertEqual(first.running, 64)
        self.assertEqual(first.preempted, 0)

        lowered = sim.advance(1, 400.0, 8)
        self.assertEqual(lowered.preempted, 56)
        self.assertEqual(lowered.running, 8)
        self.assertEqual(lowered.queue_depth, 92)
        self.assertEqual(sorted(sim.running.tolist()), list(range(8)))

        sim.advance(2, 400.0, 64)
        self.assertEqual(sorted(sim.running.tolist()), list(range(64)))
        self.assertGreater(int(sim.generated[40]), 0)
        self.assertEqual(sim.admitted, 64)

    def test_partial_steps_are_credited_pro_rata(self):
        sim = node_sim(64)
        profile = REGISTRY["Qwen1.5-MoE"]
        t_step = evaluate(profile.deployment_point(400.0, 64), profile, SPEC, SystemPowerCoeffs()).timing.t_step
        expected = 64 * 0.5 / t_step
        outcomes = [sim.advance(k, 400.0, 64) for k in range(10)]
        for out in outcomes:
            self.assertAlmostEqual(out.work, expected, delta=1e-3)
            self.assertEqual(out.tokens % 64, 0)
        credited = sum(out.work for out in outcomes)
        finished = sum(out.tokens for out in outcomes)
        self.assertLess(abs(credited - finished), 64)

    def test_backlog_is_queued_before_the_first_interval(self):
        s = scenario()
        plain = generate_arrivals(s, 0, 20.0)
        primed = generate_arrivals(s, 0, 20.0, backlog=128)
        self.assertEqual(int(primed.counts[0]), int(plain.counts[0]) + 128)
        self.assertTrue(np.array_equal(primed.counts[1:], plain.counts[1:]))
        self.assertEqual(len(primed.lengths), int(primed.counts.sum()))


class CachedPredictorTests(unittest.TestCase):
    def test_measured_power_replaces_the_prediction(self):
        cached = CachedPredictor(ANALYTIC)
        profile = REGISTRY["Qwen1.5-MoE"]
        points = [profile.deployment_point(300.0, 64), profile.deployment_point(400.0, 64)]
        _, before = cached.predict_many(profile.name, points)

        self.assertFalse(cached.observe_power(profile.name, points[0], float(before[0]) + 0.5))
        self.assertTrue(cached.observe_power(profile.name, points[0], float(before[0]) + 20.0))
        self.assertFalse(cached.observe_power(profile.name, points[0], float(before[0]) + 20.0))

        _, after = cached.predict_many(profile.name, points)
        self.assertAlmostEqual(float(after[0]), float(before[0]) + 20.0)
        self.assertEqual(float(after[1]), float(before[1]))
        _, again = cached.predict_many(profile.name, points)
        self.assertEqual(float(again[0]), float(after[0]))


class SimulationTests(unittest.TestCase):
    def test_saturated_fixed_node_matches_the_model(self):
        s = scenario(duration=30)
        result = run(s, ANALYTIC, REGISTRY, SPEC, policy="fixed")
        rows = result.nodes[0].telemetry[20:]
        measured = sum(row["tokens"] for row in rows) / (len(rows) * s.interval)

        profile = REGISTRY["Qwen1.5-MoE"]
        expected = throughput(profile.deployment_point(400.0, 64), profile, SPEC)
        self.assertAlmostEqual(measured / expected, 1.0, delta=0.03)
        self.assertTrue(all(row["cap"] == 400.0 and row["batch_cap"] == 64 for row in rows))

    def test_every_policy_sees_the_same_arrivals(self):
        results = run_baseline_suite(
            scenario(), ANALYTIC, REGISTRY, SPEC, policies=("fixed", "adaptive-cap", "oracle")
        )
        self.assertEqual(list(results), ["fixed", "adaptive-cap", "oracle"])
        self.assertEqual(len({r.arrival_hash for r in results.values()}), 1)
        reasons = {row["reason"] for row in results["oracle"].nodes[0].decisions}
        self.assertEqual(reasons, {REASON_EXHAUSTIVE})

    def test_pooled_suite_matches_sequential(self):
        s = scenario()
        sequential = run_baseline_suite(s, ANALYTIC, REGISTRY, SPEC, policies=("fixed", "pals"))
        pooled = run_baseline_suite(s, ANALYTIC, REGISTRY, SPEC, policies=("fixed", "pals"), max_workers=2)
        for policy in ("fixed", "pals"):
            self.assertEqual(sequential[policy].nodes[0].telemetry, pooled[policy].nodes[0].telemetry)

    def test_joint_allocation_stays_within_the_cluster_budget(self):
        s = scenario(
            cluster_budget=4800,
            nodes=[
                {"model": "DeepSeek-MoE", "qos_fraction": 0.9, "label": "deepseek"},
                {"model": "Mixtral-8x7B", "qos_fraction": 0.6, "label": "mixtral"},
                {"model": "OLMoE-1B-7B", "qos_fraction": 0.75, "label": "olmoe"},
            ],
        )
        result = run(s, ANALYTIC, REGISTRY, SPEC, policy="pals")
        self.assertTrue(result.budgeted)
        for row in result.budget_log:
            shares = [float(v) for v in row["node_budgets"].split(";")]
            self.assertLessEqual(sum(shares), 4800.0 + 1e-6)

    def test_even_split_below_node_floor_is_a_simulation_error(self):
        s = scenario(
            cluster_budget=1000,
            nodes=[{"model": "Qwen1.5-MoE"}, {"model": "OLMoE-1B-7B"}],
        )
        with self.assertRaises(SimulationError):
            run(s, ANALYTIC, REGISTRY, SPEC, policy="adaptive-cap")

    def test_fixed_baseline_ignores_the_budget(self):
        s = scenario(
            cluster_budget=1000,
            nodes=[{"model": "Qwen1.5-MoE"}, {"model": "OLMoE-1B-7B"}],
        )
        result = run(s, ANALYTIC, REGISTRY, SPEC, policy="fixed")
        for log in result.nodes:
            self.assertTrue(all(row["cap"] == 400.0 and row["batch_cap"] == 64 for row in log.telemetry))
            self.assertTrue(all(row["node_budget"] == "" for row in log.telemetry))
        self.assertEqual(summarize(result).budget_exceeded, 1.0)

    def test_saturated_nodes_start_at_full_batch(self):
        result = run(scenario(duration=2), ANALYTIC, REGISTRY, SPEC, policy="fixed")
        self.assertEqual(result.nodes[0].telemetry[0]["active_batch"], 64)

    def test_applied_decisions_reach_the_logger(self):
        logger = MagicMock()
        run(scenario(), ANALYTIC, REGISTRY, SPEC, policy="pals", logger=logger)
        self.assertGreaterEqual(logger.decision.call_count, 1)
        self.assertEqual(logger.decision.call_args_list[0].args[0], "qwen")


class WriteResultTests(unittest.TestCase):
    def test_files_per_node_and_summary(self):
        result = run(scenario(), ANALYTIC, REGISTRY, SPEC, policy="adaptive-batch")
        with tempfile.TemporaryDirectory() as tmp:
            written = write_result(result, tmp, summary={"policy": result.policy})
            names = sorted(p.name for p in written)
            self.assertEqual(
                names,
                [
                    "budget.csv",
                    "qwen_decisions.csv",
                    "qwen_requests.csv",
                    "qwen_telemetry.csv",
                    "summary.json",
                ],
            )
            header = (Path(tmp) / "qwen_telemetry.csv").read_text().splitlines()[0]
            self.assertTrue(header.startswith("t,cap,batch_cap"))
            self.assertEqual(json.loads((Path(tmp) / "summary.json").read_text()), {"policy": "adaptive-batch"})


if __name__ == "__main__":
    unittest.main()
