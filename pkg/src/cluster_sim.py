"""
Interval-quantized simulator of a power-capped inference cluster.

Each node serves a Poisson request stream with continuous batching. Every
control interval the node decodes as many steps as the analytic model allows
at its current cap and batch, reports telemetry, and its policy picks the
next operating point. A coordinator turns the cluster budget (static or a
trace) into per-node budgets.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

import config
from controller import (
    POLICIES,
    BudgetTrace,
    ControllerConfig,
    NodeDemand,
    TelemetrySample,
    Targets,
    allocate_budget,
    make_controller,
    node_floor,
    pack_budget,
)
from errors import ConfigError, SimulationError
from perf_model import (
    AnalyticModel,
    GpuSpec,
    ModelProfile,
    OperatingPoint,
    SystemPowerCoeffs,
    evaluate,
    floor_breakpoint,
    load_gpu_spec,
    load_registry,
    system_power,
    throughput,
)
from predictor import Hyperparams, train
from profiler import SimulatedBackend, SweepGrid, run_sweep

SATURATED = "saturated"
# saturated streams offer this multiple of the node's unconstrained capacity
SATURATION_FACTOR = 2.0


@dataclass(frozen=True)
class NodeSpec:
    model: str
    qos_fraction: float
    arrival_rate: float | None = None  # requests/s; None means saturated
    tp: int | None = None
    ep: int | None = None
    dp: int | None = None
    label: str = ""

    def __post_init__(self):
        if not 0 < self.qos_fraction <= 1:
            raise ConfigError(f"{self.model}: QoS fraction must lie in (0, 1], got {self.qos_fraction}")
        if self.arrival_rate is not None and self.arrival_rate < 0:
            raise ConfigError(f"{self.model}: arrival rate must be >= 0, got {self.arrival_rate}")

    def deployment(self, profile: ModelProfile) -> tuple[int, int, int]:
        return (
            self.tp or profile.deployment_tp,
            self.ep or profile.deployment_ep,
            self.dp or profile.deployment_dp,
        )

    @classmethod
    def from_dict(cls, data: dict[str, Any], index: int) -> NodeSpec:
        try:
            rate = data.get("arrival_rate", SATURATED)
            return cls(
                model=str(data["model"]),
                qos_fraction=float(data.get("qos_fraction", 0.9)),
                arrival_rate=None if rate == SATURATED else float(rate),
                tp=data.get("tp"),
                ep=data.get("ep"),
                dp=data.get("dp"),
                label=str(data.get("label", f"node{index}")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid node entry {index}: {exc!r}") from exc


@dataclass(frozen=True)
class Scenario:
    """A workload, its constraints and the policy to run it with."""

    name: str
    duration: float
    nodes: tuple[NodeSpec, ...]
    interval: float = config.CONTROL_INTERVAL
    seq_len: tuple[float, float] = config.SEQ_LEN_PRESETS[config.DEFAULT_SEQ_LEN]
    cluster_budget: float | None = None
    budget_trace: BudgetTrace | None = None
    policy: str = "pals"
    seed: int = config.RANDOM_SEED
    runtime_caps: tuple[float, ...] = tuple(float(c) for c in config.SWEEP_CAPS)
    runtime_batches: tuple[int, ...] = tuple(config.SWEEP_BATCHES)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    predictor_grid: SweepGrid | None = None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    noise_sigma: float = config.NOISE_SIGMA
    source: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        if self.interval <= 0:
            raise ConfigError(f"interval must be positive, got {self.interval}")
        if not self.nodes:
            raise ConfigError("a scenario needs at least one node")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy '{self.policy}' (choose from {POLICIES})")
        mean, spread = self.seq_len
        if mean < 1 or spread < 0:
            raise ConfigError(f"sequence length mean must be >= 1 and spread >= 0, got {self.seq_len}")
        if self.cluster_budget is not None and self.budget_trace is not None:
            raise ConfigError("set either cluster_budget or budget_trace, not both")
        if self.cluster_budget is not None and self.cluster_budget <= 0:
            raise ConfigError(f"cluster budget must be positive, got {self.cluster_budget}")
        if self.budget_trace is not None:
            self.budget_trace.check_covers(self.duration)
        if not self.runtime_caps or not self.runtime_batches:
            raise ConfigError("runtime caps and batches must be non-empty")
        if any(b < 1 for b in self.runtime_batches):
            raise ConfigError("runtime batches must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.interval))

    @property
    def tracking(self) -> bool:
        """A budget trace is a signal to follow, not just a ceiling."""
        return self.budget_trace is not None

    def budget_at(self, t: float) -> float | None:
        if self.budget_trace is not None:
            return self.budget_trace.value_at(t)
        return self.cluster_budget

    def config_hash(self) -> str:
        blob = json.dumps(self.source, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: str | Path = ".") -> Scenario:
        try:
            seq_len = data.get("seq_len", config.DEFAULT_SEQ_LEN)
            if isinstance(seq_len, str):
                if seq_len not in config.SEQ_LEN_PRESETS:
                    raise ConfigError(
                        f"unknown seq_len preset '{seq_len}' (choose from {sorted(config.SEQ_LEN_PRESETS)})"
                    )
                seq_len = config.SEQ_LEN_PRESETS[seq_len]
            else:
                seq_len = (float(seq_len["mean"]), float(seq_len.get("spread", 0.6)))

            trace = None
            if data.get("budget_trace"):
                trace = BudgetTrace.from_csv(Path(base_dir) / data["budget_trace"])

            predictor_cfg = data.get("predictor", {})
            grid = predictor_cfg.get("grid")
            return cls(
                name=str(data.get("name", "scenario")),
                duration=float(data["duration"]),
                nodes=tuple(NodeSpec.from_dict(n, i) for i, n in enumerate(data["nodes"])),
                interval=float(data.get("interval", config.CONTROL_INTERVAL)),
                seq_len=tuple(seq_len),
                cluster_budget=(
                    float(data["cluster_budget"]) if data.get("cluster_budget") is not None else None
                ),
                budget_trace=trace,
                policy=str(data.get("policy", "pals")),
                seed=int(data.get("seed", config.RANDOM_SEED)),
                runtime_caps=tuple(float(c) for c in data.get("runtime_caps", config.SWEEP_CAPS)),
                runtime_batches=tuple(int(b) for b in data.get("runtime_batches", config.SWEEP_BATCHES)),
                controller=ControllerConfig.from_dict(
                    {**data.get("controller", {}), "interval": data.get("interval", config.CONTROL_INTERVAL)}
                ),
                predictor_grid=SweepGrid.from_dict(grid) if grid else None,
                hyperparams=Hyperparams.from_dict(predictor_cfg.get("hyperparams")),
                noise_sigma=float(predictor_cfg.get("noise_sigma", config.NOISE_SIGMA)),
                source=data,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario: {exc!r}") from exc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {path} is not valid JSON: {exc}") from exc
    return Scenario.from_dict(data, base_dir=path.parent)


@dataclass(frozen=True)
class Request:
    id: int
    arrival_time: float
    output_len: int
    generated: int = 0
    done: bool = False

    def __post_init__(self):
        if self.generated > self.output_len:
            raise SimulationError(f"request {self.id} generated more tokens than its length")


def effective_batch(queue_depth: int, running: int, batch_cap: int) -> int:
    """Sequences in the next decode step under continuous batching."""
    if min(queue_depth, running, batch_cap) < 0:
        raise ConfigError("effective_batch inputs must be non-negative")
    return min(batch_cap, running + queue_depth)


@dataclass(frozen=True)
class NodeArrivals:
    counts: np.ndarray  # requests arriving in each interval
    lengths: np.ndarray  # output length per request, in arrival order

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.counts.astype(np.int64).tobytes())
        h.update(self.lengths.astype(np.int64).tobytes())
        return h.hexdigest()


def offered_rate(node: NodeSpec, capacity: float, mean_len: float) -> float:
    """Requests per second a node receives; saturated nodes get a multiple of capacity."""
    if node.arrival_rate is None:
        return SATURATION_FACTOR * capacity / mean_len
    return node.arrival_rate


def generate_arrivals(scenario: Scenario, index: int, rate: float, backlog: int = 0) -> NodeArrivals:
    """
    Arrival counts and output lengths for one node, independent of the policy.

    ``backlog`` requests are already queued when the run starts; saturated
    nodes use it so the first intervals run at full batch.
    """
    rng = np.random.default_rng([scenario.seed, index])
    counts = rng.poisson(rate * scenario.interval, scenario.steps)
    if backlog and len(counts):
        counts[0] += backlog
    mean, spread = scenario.seq_len
    total = int(counts.sum())
    if spread > 0:
        mu = math.log(mean) - spread * spread / 2.0
        lengths = np.maximum(1, np.rint(rng.lognormal(mu, spread, total))).astype(np.int64)
    else:
        lengths = np.full(total, int(round(mean)), dtype=np.int64)
    return NodeArrivals(counts=counts.astype(np.int64), lengths=lengths)


class CachedPredictor:
    """
    Memoizes predict_many per (model, candidate tuple); candidate tables repeat every interval.

    Per-GPU power measured at a point in steady state replaces the model's
    prediction for that point from then on.
    """

    def __init__(self, inner, power_tolerance: float = 1.0):
        self.inner = inner
        self.power_tolerance = power_tolerance
        self._cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._measured: dict[str, dict[OperatingPoint, float]] = {}
        self._lock = threading.Lock()

    def predict_many(self, model_id: str, points: Sequence[OperatingPoint]):
        key = (model_id, tuple(points))
        with self._lock:
            hit = self._cache.get(key)
            measured = dict(self._measured.get(model_id, {}))
        if hit is None:
            hit = self.inner.predict_many(model_id, points)
            with self._lock:
                self._cache[key] = hit
        if not measured:
            return hit
        tput, power = hit
        power = power.copy()
        for i, point in enumerate(points):
            if point in measured:
                power[i] = measured[point]
        return tput, power

    def observe_power(self, model_id: str, point: OperatingPoint, gpu_power: float) -> bool:
        """Record a steady-state measurement; True when it moves the estimate for that point."""
        with self._lock:
            known = self._measured.get(model_id, {}).get(point)
        if known is None:
            known = float(self.inner.predict_many(model_id, [point])[1][0])
        if abs(gpu_power - known) <= self.power_tolerance:
            return False
        with self._lock:
            self._measured.setdefault(model_id, {})[point] = float(gpu_power)
        return True


@dataclass
class Actuator:
    """Holds the knobs in force; cap changes land ``latency`` intervals after the request."""

    cap: float
    batch_cap: int
    latency: int = 1
    pending_cap: float | None = None
    pending_due: int = 0

    def request(self, point: OperatingPoint, interval_index: int) -> None:
        self.batch_cap = point.batch_size
        if point.power_cap != self.cap:
            self.pending_cap = point.power_cap
            self.pending_due = interval_index + self.latency
        else:
            self.pending_cap = None

    def tick(self, interval_index: int) -> None:
        if self.pending_cap is not None and interval_index >= self.pending_due:
            self.cap = self.pending_cap
            self.pending_cap = None

    @property
    def settled(self) -> bool:
        return self.pending_cap is None


@dataclass(frozen=True)
class IntervalOutcome:
    tokens: int  # tokens from decode steps that finished inside the interval
    work: float  # tokens with the in-flight step credited pro rata
    gpu_power: float
    busy: float
    queue_depth: int
    running: int
    preempted: int = 0


class NodeSim:
    """Request bookkeeping and decode-step accounting for one node."""

    def __init__(
        self,
        profile: ModelProfile,
        spec: GpuSpec,
        deployment: tuple[int, int, int],
        arrivals: NodeArrivals,
        interval: float,
    ):
        self.profile = profile
        self.spec = spec
        self.tp, self.ep, self.dp = deployment
        self.interval = interval
        self.counts = arrivals.counts
        self.lengths = arrivals.lengths
        self.arrival_step = np.repeat(np.arange(len(self.counts)), self.counts)
        self.cum_counts = np.cumsum(self.counts)
        self.generated = np.zeros(len(self.lengths), dtype=np.int64)
        self.finish = np.full(len(self.lengths), np.nan)
        self.arrived = 0
        self.admitted = 0
        self.running = np.zeros(0, dtype=np.int64)
        self.remaining = np.zeros(0, dtype=np.int64)
        # preempted sequences wait here, ahead of the fresh queue
        self.held = np.zeros(0, dtype=np.int64)
        self.held_remaining = np.zeros(0, dtype=np.int64)
        self.progress = 0.0
        self.credited = 0.0
        self._step_cache: dict[tuple[float, int], tuple[float, float]] = {}

    def _step(self, cap: float, per_replica: int) -> tuple[float, float]:
        key = (cap, per_replica)
        if key not in self._step_cache:
            point = OperatingPoint(cap, per_replica, self.tp, self.ep, self.dp)
            metrics = evaluate(point, self.profile, self.spec, SystemPowerCoeffs())
            self._step_cache[key] = (metrics.timing.t_step, min(metrics.gpu_power, cap))
        return self._step_cache[key]

    def _preempt(self, slots: int) -> int:
        """Return the newest running sequences beyond ``slots`` to the head of the queue."""
        excess = len(self.running) - slots
        if excess <= 0:
            return 0
        self.held = np.concatenate([self.running[slots:], self.held])
        self.held_remaining = np.concatenate([self.remaining[slots:], self.held_remaining])
        self.running = self.running[:slots]
        self.remaining = self.remaining[:slots]
        return excess

    def _admit(self, slots: int) -> None:
        free = effective_batch(self.queue_depth, len(self.running), slots) - len(self.running)
        if free <= 0:
            return
        resumed = min(free, len(self.held))
        if resumed:
            self.running = np.concatenate([self.running, self.held[:resumed]])
            self.remaining = np.concatenate([self.remaining, self.held_remaining[:resumed]])
            self.held = self.held[resumed:]
            self.held_remaining = self.held_remaining[resumed:]
        fresh = free - resumed
        if fresh:
            new = np.arange(self.admitted, self.admitted + fresh, dtype=np.int64)
            self.admitted += fresh
            self.running = np.concatenate([self.running, new])
            self.remaining = np.concatenate([self.remaining, self.lengths[new]])

    @property
    def queue_depth(self) -> int:
        return len(self.held) + self.arrived - self.admitted

    def advance(self, k: int, cap: float, batch_cap: int) -> IntervalOutcome:
        """Simulate interval k at the given cap and batch cap."""
        self.arrived = int(self.cum_counts[k]) if len(self.cum_counts) else 0
        preempted = self._preempt(batch_cap * self.dp)
        t, tokens, energy, busy = 0.0, 0, 0.0, 0.0
        carried, self.credited = self.credited, 0.0
        start = k * self.interval
        while self.interval - t > 1e-12:
            self._admit(batch_cap * self.dp)
            n = len(self.running)
            left = self.interval - t
            if n == 0:
                energy += left * self.spec.p_idle
                self.progress = 0.0
                break
            t_step, power = self._step(cap, math.ceil(n / self.dp))
            first = (1.0 - self.progress) * t_step
            if first > left + 1e-12:
                self.progress += left / t_step
                self.credited = n * self.progress
                energy += left * power
                busy += left
                break
            steps = int(min(self.remaining.min(), 1 + math.floor((left - first) / t_step + 1e-9)))
            dt = first + (steps - 1) * t_step
            energy += dt * power
            busy += dt
            t += dt
            self.progress = 0.0
            self.remaining -= steps
            self.generated[self.running] += steps
            tokens += steps * n
            done = self.remaining == 0
            if done.any():
                self.finish[self.running[done]] = start + t
                self.running = self.running[~done]
                self.remaining = self.remaining[~done]
        return IntervalOutcome(
            tokens=tokens,
            work=max(0.0, tokens - carried + self.credited),
            gpu_power=min(energy / self.interval, cap),
            busy=min(busy / self.interval, 1.0),
            queue_depth=self.queue_depth,
            running=len(self.running),
            preempted=preempted,
        )

    def requests(self) -> list[Request]:
        """Every admitted request with its progress so far."""
        return [
            Request(
                id=rid,
                arrival_time=float(self.arrival_step[rid] * self.interval),
                output_len=int(self.lengths[rid]),
                generated=int(self.generated[rid]),
                done=not math.isnan(self.finish[rid]),
            )
            for rid in range(self.admitted)
        ]

    def completions(self, label: str) -> list[dict[str, Any]]:
        return [
            {
                "node": label,
                "id": request.id,
                "arrival_time": request.arrival_time,
                "output_len": request.output_len,
                "generated": request.generated,
                "finish_time": float(self.finish[request.id]) if request.done else "",
            }
            for request in self.requests()
        ]


@dataclass
class NodeLog:
    label: str
    model_id: str
    qos_target: float
    deployment: tuple[int, int, int]
    telemetry: list[dict[str, Any]] = field(default_factory=list)
    decisions: list[dict[str, Any]] = field(default_factory=list)
    completions: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class SimResult:
    scenario: str
    policy: str
    interval: float
    duration: float
    nodes: list[NodeLog]
    budget_log: list[dict[str, Any]]
    arrival_hash: str
    config_hash: str = ""

    @property
    def budgeted(self) -> bool:
        return any(row["cluster_budget"] != "" for row in self.budget_log)


def node_capacity(profile: ModelProfile, spec: GpuSpec, deployment, max_batch: int) -> float:
    tp, ep, dp = deployment
    return throughput(OperatingPoint(spec.p_max_cap, max_batch, tp, ep, dp), profile, spec)


def node_caps(scenario: Scenario, profile: ModelProfile, spec: GpuSpec) -> list[float]:
    """Runtime caps for a node: the scenario caps at or above the frequency-floor breakpoint."""
    breakpoint_ = floor_breakpoint(profile, spec)
    caps = sorted(c for c in scenario.runtime_caps if c >= breakpoint_ - 1e-9)
    for cap in scenario.runtime_caps:
        if not spec.p_min_cap <= cap <= spec.p_max_cap:
            raise ConfigError(f"runtime cap {cap} W outside [{spec.p_min_cap}, {spec.p_max_cap}]")
    if not caps:
        raise ConfigError(f"{profile.name}: no runtime cap at or above {breakpoint_:.0f} W")
    return caps


def build_predictor(
    scenario: Scenario,
    registry: dict[str, ModelProfile],
    spec: GpuSpec,
    logger=None,
    max_workers: int = 1,
):
    """Profile the scenario's models on the simulated backend and train an ensemble."""
    grid = scenario.predictor_grid or SweepGrid()
    backend = SimulatedBackend(spec, sigma=scenario.noise_sigma)
    records = []
    for model_id in sorted({node.model for node in scenario.nodes}):
        dataset = run_sweep(
            grid, registry[model_id], backend, noise_seed=scenario.seed, max_workers=max_workers, logger=logger
        )
        records.extend(dataset.records)
    if logger:
        logger.event(f"Training predictor on {len(records)} profiling records")
    return train(records, scenario.hyperparams, seed=scenario.seed)


def _resolve(scenario: Scenario, registry, spec):
    profiles = []
    for node in scenario.nodes:
        if node.model not in registry:
            raise ConfigError(
                f"scenario '{scenario.name}' uses unregistered model '{node.model}' "
                f"(available: {sorted(registry)})"
            )
        profiles.append(registry[node.model])
    return profiles


def run(
    scenario: Scenario,
    predictor=None,
    registry: dict[str, ModelProfile] | None = None,
    spec: GpuSpec | None = None,
    policy: str | None = None,
    logger=None,
) -> SimResult:
    """
    Run one policy over a scenario.

    Args:
        scenario (Scenario): Workload, constraints and controller settings.
        predictor: Trained predictor for every policy except ``oracle``;
            built from a fresh profiling sweep when omitted.
        registry (dict, optional): Profiles by name; the shipped ones by default.
        spec (GpuSpec, optional): Platform; the shipped A100 spec by default.
        policy (str, optional): Overrides the scenario's policy.
        logger (RunLogger, optional): Receives applied decisions.

    Returns:
        SimResult: Telemetry, decisions and completions per node.
    """
    spec = spec or load_gpu_spec(config.GPU_SPEC_FILE)
    registry = registry or load_registry(config.PROFILE_DIR, spec)
    policy = policy or scenario.policy
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy '{policy}' (choose from {POLICIES})")
    profiles = _resolve(scenario, registry, spec)
    coeffs = SystemPowerCoeffs()
    analytic = CachedPredictor(AnalyticModel(registry, spec, coeffs))
    if policy != "oracle" and predictor is None:
        predictor = build_predictor(scenario, registry, spec, logger)
    cached = CachedPredictor(predictor) if predictor is not None else None

    max_batch = max(scenario.runtime_batches)
    mean_len = scenario.seq_len[0]
    sims, controllers, logs = [], [], []
    digests = []
    for index, (node, profile) in enumerate(zip(scenario.nodes, profiles)):
        deployment = node.deployment(profile)
        capacity = node_capacity(profile, spec, deployment, max_batch)
        rate = offered_rate(node, capacity, mean_len)
        backlog = max_batch * deployment[2] if node.arrival_rate is None else 0
        arrivals = generate_arrivals(scenario, index, rate, backlog)
        digests.append(arrivals.digest())
        target = node.qos_fraction * min(capacity, rate * mean_len)
        caps = node_caps(scenario, profile, spec)
        controllers.append(
            make_controller(
                policy,
                profile.name,
                caps,
                scenario.runtime_batches,
                deployment,
                cached,
                analytic=analytic,
                cfg=scenario.controller,
                coeffs=coeffs,
            )
        )
        sims.append(NodeSim(profile, spec, deployment, arrivals, scenario.interval))
        logs.append(NodeLog(node.label, profile.name, target, deployment))

    joint = policy in ("pals", "oracle")
    budgeted = policy in ("adaptive-cap", "pals", "oracle")
    planner = cached if policy != "oracle" else analytic
    node_budgets: list[float | None] = [None] * len(sims)
    last_budget = object()

    def coordinate(t: float, force: bool = False) -> None:
        nonlocal last_budget, node_budgets
        budget = scenario.budget_at(t)
        if budget == last_budget and not force:
            return
        last_budget = budget
        if budget is None or not budgeted:
            node_budgets = [None] * len(sims)
            return
        if joint:
            demands = [
                NodeDemand(log.model_id, log.qos_target, ctrl.candidates)
                for log, ctrl in zip(logs, controllers)
            ]
            split = pack_budget if scenario.tracking else allocate_budget
            node_budgets = split(demands, budget, planner, spec, coeffs)
            return
        share = budget / len(sims)
        floors = [node_floor(ctrl.candidates, spec, coeffs) for ctrl in controllers]
        if share + 1e-9 < max(floors):
            raise SimulationError(f"per-node share {share:.0f} W is below a node floor {max(floors):.0f} W")
        node_budgets = [share] * len(sims)

    coordinate(0.0)
    actuators = []
    for ctrl in controllers:
        start = ctrl.candidates[-1]
        actuators.append(Actuator(cap=start.power_cap, batch_cap=start.batch_size))

    budget_log = []
    for k in range(scenario.steps):
        t_end = (k + 1) * scenario.interval
        cluster_budget = scenario.budget_at(k * scenario.interval)
        budget_log.append(
            {
                "t": k * scenario.interval,
                "cluster_budget": "" if cluster_budget is None else cluster_budget,
                "node_budgets": ";".join("" if b is None else repr(float(b)) for b in node_budgets),
            }
        )
        outcomes = []
        for sim, act in zip(sims, actuators):
            act.tick(k)
            outcomes.append(sim.advance(k, act.cap, act.batch_cap))

        remeasured = False
        for i, (act, log, out) in enumerate(zip(actuators, logs, outcomes)):
            tp, ep, dp = log.deployment
            steady = act.settled and out.busy >= 1.0 - 1e-9 and out.running == act.batch_cap * dp
            if joint and node_budgets[i] is not None and steady:
                point = OperatingPoint(act.cap, act.batch_cap, tp, ep, dp)
                remeasured |= planner.observe_power(log.model_id, point, out.gpu_power)
        coordinate(t_end, force=remeasured)

        for i, (sim, act, ctrl, log, out) in enumerate(zip(sims, actuators, controllers, logs, outcomes)):
            tp, ep, dp = log.deployment
            per_gpu = (out.gpu_power,) * (config.GPUS_PER_NODE * dp)
            sys_power = dp * system_power([out.gpu_power] * config.GPUS_PER_NODE, coeffs)
            tput = out.work / scenario.interval
            telemetry = TelemetrySample(
                t=t_end,
                per_gpu_power=per_gpu,
                throughput=tput,
                utilization=out.busy,
                queue_depth=out.queue_depth,
                active_batch=out.running,
                system_power=sys_power,
            )
            log.telemetry.append(
                {
                    "t": t_end,
                    "cap": act.cap,
                    "batch_cap": act.batch_cap,
                    "active_batch": out.running,
                    "queue_depth": out.queue_depth,
                    "preempted": out.preempted,
                    "tokens": out.tokens,
                    "throughput": tput,
                    "gpu_power": out.gpu_power,
                    "system_power": sys_power,
                    "utilization": out.busy,
                    "target": log.qos_target,
                    "node_budget": "" if node_budgets[i] is None else node_budgets[i],
                }
            )
            targets = Targets(
                log.qos_target,
                power_budget=node_budgets[i],
                epsilon=scenario.controller.epsilon,
                track=scenario.tracking and node_budgets[i] is not None,
            )
            decision = ctrl.step(telemetry, targets, now=t_end)
            log.decisions.append(
                {
                    "t": t_end,
                    "cap": decision.point.power_cap,
                    "batch": decision.point.batch_size,
                    "tp": decision.point.tp,
                    "ep": decision.point.ep,
                    "dp": decision.point.dp,
                    "applied": int(decision.applied),
                    "reason": decision.reason,
                    "error": decision.error,
                    "bias": decision.bias,
                    "predicted_throughput": decision.predicted_throughput,
                    "predicted_power": decision.predicted_power,
                }
            )
            if decision.applied:
                act.request(decision.point, k)
                if logger:
                    logger.decision(
                        log.label, t_end, decision.point, decision.reason, decision.error, decision.bias
                    )

    for sim, log in zip(sims, logs):
        log.completions = sim.completions(log.label)
    return SimResult(
        scenario=scenario.name,
        policy=policy,
        interval=scenario.interval,
        duration=scenario.steps * scenario.interval,
        nodes=logs,
        budget_log=budget_log,
        arrival_hash=hashlib.sha256("".join(digests).encode()).hexdigest(),
        config_hash=scenario.config_hash(),
    )


def run_baseline_suite(
    scenario: Scenario,
    predictor=None,
    registry: dict[str, ModelProfile] | None = None,
    spec: GpuSpec | None = None,
    policies: Sequence[str] = POLICIES,
    max_workers: int = 1,
    logger=None,
) -> dict[str, SimResult]:
    """
    Run every policy on the same arrival streams.

    Raises:
        SimulationError: If two policies saw different arrival streams.
    """
    spec = spec or load_gpu_spec(config.GPU_SPEC_FILE)
    registry = registry or load_registry(config.PROFILE_DIR, spec)
    _resolve(scenario, registry, spec)
    if predictor is None and any(p != "oracle" for p in policies):
        predictor = build_predictor(scenario, registry, spec, logger)

    results: dict[str, SimResult] = {}
    if max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
            future_to_policy = {
                executor.submit(run, scenario, predictor, registry, spec, policy): policy
                for policy in policies
            }
            for future in concurrent.futures.as_completed(future_to_policy):
                policy = future_to_policy[future]
                try:
                    results[policy] = future.result()
                except Exception as e:
                    raise SimulationError(f"policy '{policy}' failed: {e}") from e
    else:
        for policy in policies:
            if logger:
                logger.event(f"Running policy '{policy}' on scenario '{scenario.name}'")
            results[policy] = run(scenario, predictor, registry, spec, policy)

    hashes = {result.arrival_hash for result in results.values()}
    if len(hashes) != 1:
        raise SimulationError("policies saw different arrival streams")
    return {policy: results[policy] for policy in policies}


def _write_rows(path: Path, rows: list[dict[str, Any]]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_result(result: SimResult, out_dir: str | Path, summary: dict[str, Any] | None = None) -> list[Path]:
    """Telemetry, decision and completion CSVs per node, the budget log, and a summary JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for log in result.nodes:
        for kind, rows in (
            ("telemetry", log.telemetry),
            ("decisions", log.decisions),
            ("requests", log.completions),
        ):
            path = out_dir / f"{log.label}_{kind}.csv"
            _write_rows(path, rows)
            written.append(path)
    path = out_dir / "budget.csv"
    _write_rows(path, result.budget_log)
    written.append(path)
    if summary is not None:
        path = out_dir / "summary.json"
        with open(path, "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        written.append(path)
    return written
