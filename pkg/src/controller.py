"""
Closed-loop joint power-cap and batch-size controller.

Every control interval the node measures its throughput, a PID loop turns the
normalized shortfall into a multiplicative bias on predicted throughput, and
the candidate table is re-scored. A new operating point is applied only when
the error has stayed outside the deadband for several intervals or when the
targets themselves change. A coordinator splits a cluster budget across
nodes by water-filling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

import config
from errors import ConfigError, DataError
from perf_model import AnalyticModel, GpuSpec, OperatingPoint, SystemPowerCoeffs

REASON_QOS = "qos-feasible-max-efficiency"
REASON_MAX_THROUGHPUT = "fallback-max-throughput"
REASON_BUDGET = "budget-constrained-max-throughput"
REASON_TRACK = "budget-tracking-max-throughput"
REASON_MIN_POWER = "fallback-min-power"
REASON_HOLD = "hold-hysteresis"
REASON_EXHAUSTIVE = "exhaustive"

POLICIES = ("fixed", "adaptive-batch", "adaptive-cap", "pals", "oracle")

# slack on watt comparisons so a budget equal to a candidate's power admits it
_POWER_TOL = 1e-9


@dataclass(frozen=True)
class ControllerConfig:
    kp: float = config.PID_KP
    ki: float = config.PID_KI
    kd: float = config.PID_KD
    integral_limit: float = config.PID_INTEGRAL_LIMIT
    bias_min: float = config.BIAS_MIN
    bias_max: float = config.BIAS_MAX
    epsilon: float = config.EPSILON
    n_sustain: int = config.N_SUSTAIN
    interval: float = config.CONTROL_INTERVAL

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ConfigError("PID gains must be non-negative")
        if self.integral_limit <= 0:
            raise ConfigError("integral_limit must be positive")
        if not 0 < self.bias_min <= 1.0 <= self.bias_max:
            raise ConfigError("bias bounds must satisfy 0 < bias_min <= 1 <= bias_max")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.n_sustain < 1:
            raise ConfigError(f"n_sustain must be >= 1, got {self.n_sustain}")
        if self.interval <= 0:
            raise ConfigError(f"interval must be positive, got {self.interval}")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> ControllerConfig:
        if not data:
            return cls()
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown controller settings: {sorted(unknown)}")
        values = {key: (int(v) if key == "n_sustain" else float(v)) for key, v in data.items()}
        return cls(**values)

    def to_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class Targets:
    """
    What a node is asked for this interval.

    With ``track`` set the node follows its budget: it takes the highest
    predicted throughput that fits, whether or not that meets the QoS target.
    """

    throughput_target: float
    power_budget: float | None = None
    epsilon: float = config.EPSILON
    track: bool = False

    def __post_init__(self):
        if not self.throughput_target > 0:
            raise ConfigError(f"throughput target must be positive, got {self.throughput_target}")
        if self.power_budget is not None and self.power_budget <= 0:
            raise ConfigError(f"power budget must be positive, got {self.power_budget}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.track and self.power_budget is None:
            raise ConfigError("budget tracking needs a power budget")


@dataclass(frozen=True)
class TelemetrySample:
    """What a node reports at the end of one control interval."""

    t: float
    per_gpu_power: tuple[float, ...]
    throughput: float
    utilization: float
    queue_depth: int
    active_batch: int
    system_power: float = 0.0

    def __post_init__(self):
        if self.throughput < 0:
            raise DataError(f"telemetry throughput must be >= 0, got {self.throughput}")
        if not 0.0 <= self.utilization <= 1.0:
            raise DataError(f"telemetry utilization must lie in [0, 1], got {self.utilization}")


@dataclass(frozen=True)
class PidState:
    kp: float
    ki: float
    kd: float
    integral_limit: float
    integral: float = 0.0
    prev_error: float | None = None

    @classmethod
    def from_config(cls, cfg: ControllerConfig) -> PidState:
        return cls(kp=cfg.kp, ki=cfg.ki, kd=cfg.kd, integral_limit=cfg.integral_limit)

    def output(self, error: float) -> tuple[float, PidState]:
        """PID output for this error and the state with the integral advanced."""
        integral = min(max(self.integral + error, -self.integral_limit), self.integral_limit)
        derivative = 0.0 if self.prev_error is None else error - self.prev_error
        value = self.kp * error + self.ki * integral + self.kd * derivative
        return value, replace(self, integral=integral, prev_error=error)

    def observe(self, error: float) -> PidState:
        return replace(self, prev_error=error)


@dataclass(frozen=True)
class ControllerState:
    pid: PidState
    bias: float = 1.0
    sustain_counter: int = 0
    current_point: OperatingPoint | None = None
    last_targets: Targets | None = None

    @classmethod
    def initial(
        cls, cfg: ControllerConfig | None = None, point: OperatingPoint | None = None
    ) -> ControllerState:
        return cls(pid=PidState.from_config(cfg or ControllerConfig()), current_point=point)


@dataclass(frozen=True)
class Decision:
    point: OperatingPoint
    applied: bool
    reason: str
    predicted_throughput: float = 0.0
    predicted_power: float = 0.0
    error: float = 0.0
    bias: float = 1.0


def predicted_system_power(
    gpu_power: np.ndarray, points: Sequence[OperatingPoint], coeffs: SystemPowerCoeffs
) -> np.ndarray:
    """Server power summed over each point's dp servers, all GPUs drawing gpu_power."""
    dps = np.array([p.dp for p in points], dtype=float)
    return dps * (coeffs.alpha * config.GPUS_PER_NODE * np.asarray(gpu_power) + coeffs.beta)


def _pick(values: np.ndarray, mask: np.ndarray, points: Sequence[OperatingPoint], largest=True) -> int:
    indices = np.flatnonzero(mask)
    chosen = values[indices]
    best = chosen.max() if largest else chosen.min()
    tied = [int(i) for i in indices if values[i] == best]
    return min(tied, key=lambda i: (points[i].power_cap, points[i].batch_size, points[i].sort_key()))


def select_config(
    candidates: Sequence[OperatingPoint],
    targets: Targets,
    predictor,
    state: ControllerState,
    model_id: str,
    coeffs: SystemPowerCoeffs | None = None,
) -> Decision:
    """
    Pick the operating point for the current targets.

    The most efficient candidate predicted to meet the throughput target (and
    the budget, when one is set) wins. Otherwise the highest-throughput
    candidate within budget, or, with no budget, the highest-throughput
    candidate overall. Exact ties go to the lower cap, then the smaller batch.

    In tracking mode the highest-throughput candidate within budget wins
    outright, ties going to the one drawing the most power.
    """
    if len(candidates) == 0:
        raise ConfigError("select_config needs at least one candidate")
    coeffs = coeffs or SystemPowerCoeffs()
    tput, gpu_power = predictor.predict_many(model_id, candidates)
    tput = np.asarray(tput, dtype=float) * state.bias
    sys_power = predicted_system_power(gpu_power, candidates, coeffs)
    eff = tput / sys_power

    if targets.power_budget is None:
        within = np.ones(len(candidates), dtype=bool)
    else:
        within = sys_power <= targets.power_budget + _POWER_TOL
    meets = within & (tput >= targets.throughput_target)

    if targets.track and within.any():
        tied = within & (tput == tput[within].max())
        index, reason = _pick(sys_power, tied, candidates), REASON_TRACK
    elif meets.any():
        index, reason = _pick(eff, meets, candidates), REASON_QOS
    elif targets.power_budget is None:
        index, reason = _pick(tput, within, candidates), REASON_MAX_THROUGHPUT
    elif within.any():
        index, reason = _pick(tput, within, candidates), REASON_BUDGET
    else:
        everything = np.ones(len(candidates), dtype=bool)
        index, reason = _pick(sys_power, everything, candidates, largest=False), REASON_MIN_POWER

    return Decision(
        point=candidates[index],
        applied=False,
        reason=reason,
        predicted_throughput=float(tput[index]),
        predicted_power=float(sys_power[index]),
        bias=state.bias,
    )


def control_step(
    telemetry: TelemetrySample,
    targets: Targets,
    candidates: Sequence[OperatingPoint],
    predictor,
    state: ControllerState,
    model_id: str,
    cfg: ControllerConfig | None = None,
    coeffs: SystemPowerCoeffs | None = None,
    now: float | None = None,
    hysteresis: bool = True,
    adapt_bias: bool = True,
) -> tuple[Decision, ControllerState]:
    """
    One iteration of the runtime loop.

    Args:
        telemetry (TelemetrySample): Measurements from the interval just ended.
        targets (Targets): Throughput target and optional node budget.
        candidates: Runtime operating points at the deployed parallelism.
        predictor: Anything with ``predict_many(model_id, points)``.
        state (ControllerState): State from the previous interval.
        model_id (str): Model served by the node.
        cfg (ControllerConfig, optional): Gains, deadband and sustain count.
        coeffs (SystemPowerCoeffs, optional): Server power model.
        now (float, optional): Controller clock; telemetry older than one
            interval is treated as stale.
        hysteresis (bool): Apply only on sustained deviation or target changes.
        adapt_bias (bool): Run the PID bias correction.

    Returns:
        tuple: (Decision, new ControllerState).
    """
    cfg = cfg or ControllerConfig()
    first = state.current_point is None

    if not first and now is not None and now - telemetry.t > cfg.interval + 1e-9:
        return (
            Decision(point=state.current_point, applied=False, reason=REASON_HOLD, bias=state.bias),
            state,
        )

    error = (targets.throughput_target - telemetry.throughput) / targets.throughput_target
    pid, bias, counter = state.pid, state.bias, state.sustain_counter
    if abs(error) > targets.epsilon:
        counter += 1
        if adapt_bias:
            output, pid = pid.output(error)
            bias = min(max(bias * (1.0 - output), cfg.bias_min), cfg.bias_max)
        else:
            pid = pid.observe(error)
    else:
        counter = 0
        pid = pid.observe(error)

    scored = replace(state, pid=pid, bias=bias, sustain_counter=counter)
    choice = select_config(candidates, targets, predictor, scored, model_id, coeffs)
    changed = first or state.last_targets != targets

    if changed or counter >= cfg.n_sustain or not hysteresis:
        applied = first or choice.point != state.current_point
        decision = replace(choice, applied=applied, error=error)
        return decision, replace(
            scored, sustain_counter=0, current_point=choice.point, last_targets=targets
        )

    hold = Decision(
        point=state.current_point,
        applied=False,
        reason=REASON_HOLD,
        predicted_throughput=choice.predicted_throughput,
        predicted_power=choice.predicted_power,
        error=error,
        bias=bias,
    )
    return hold, replace(scored, last_targets=targets)


def runtime_candidates(
    caps: Sequence[float], batches: Sequence[int], tp: int = 1, ep: int = 1, dp: int = 1
) -> list[OperatingPoint]:
    """Cap x batch table at fixed parallelism, in canonical order."""
    points = [
        OperatingPoint(power_cap=float(cap), batch_size=int(batch), tp=tp, ep=ep, dp=dp)
        for cap in caps
        for batch in batches
    ]
    return sorted(points, key=OperatingPoint.sort_key)


@dataclass
class Controller:
    """One node's policy: a candidate table, a predictor and the loop state."""

    model_id: str
    policy: str
    candidates: list[OperatingPoint]
    predictor: Any
    cfg: ControllerConfig = field(default_factory=ControllerConfig)
    coeffs: SystemPowerCoeffs = field(default_factory=SystemPowerCoeffs)
    state: ControllerState | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy '{self.policy}' (choose from {POLICIES})")
        if not self.candidates:
            raise ConfigError(f"{self.model_id}: policy '{self.policy}' has no candidates")
        if self.state is None:
            self.state = ControllerState.initial(self.cfg)

    @property
    def current_point(self) -> OperatingPoint | None:
        return self.state.current_point

    def step(self, telemetry: TelemetrySample, targets: Targets, now: float | None = None) -> Decision:
        oracle = self.policy == "oracle"
        decision, self.state = control_step(
            telemetry,
            targets,
            self.candidates,
            self.predictor,
            self.state,
            self.model_id,
            cfg=self.cfg,
            coeffs=self.coeffs,
            now=now,
            hysteresis=not oracle,
            adapt_bias=not oracle,
        )
        if oracle:
            decision = replace(decision, reason=REASON_EXHAUSTIVE)
        return decision


def make_controller(
    policy: str,
    model_id: str,
    caps: Sequence[float],
    batches: Sequence[int],
    deployment: tuple[int, int, int],
    predictor,
    analytic: AnalyticModel | None = None,
    cfg: ControllerConfig | None = None,
    coeffs: SystemPowerCoeffs | None = None,
) -> Controller:
    """
    Build a node controller for one of the baseline policies.

    ``fixed`` and ``adaptive-batch`` hold the cap at the largest runtime cap
    and ignore any budget; ``fixed`` and ``adaptive-cap`` hold the batch cap
    at its maximum; ``oracle`` scores candidates on the analytic
    model instead of the predictor.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy '{policy}' (choose from {POLICIES})")
    tp, ep, dp = deployment
    cap = float(max(caps))
    max_batch = max(batches)
    if policy == "fixed":
        candidates = runtime_candidates([cap], [max_batch], tp, ep, dp)
    elif policy == "adaptive-batch":
        candidates = runtime_candidates([cap], batches, tp, ep, dp)
    elif policy == "adaptive-cap":
        candidates = runtime_candidates(caps, [max_batch], tp, ep, dp)
    else:
        candidates = runtime_candidates(caps, batches, tp, ep, dp)

    if policy == "oracle":
        if analytic is None:
            raise ConfigError("the oracle policy needs the analytic model")
        predictor = analytic
    return Controller(
        model_id=model_id,
        policy=policy,
        candidates=candidates,
        predictor=predictor,
        cfg=cfg or ControllerConfig(),
        coeffs=coeffs or SystemPowerCoeffs(),
    )


@dataclass(frozen=True)
class NodeDemand:
    model_id: str
    qos_target: float
    candidates: list[OperatingPoint]


def node_floor(candidates: Sequence[OperatingPoint], spec: GpuSpec, coeffs: SystemPowerCoeffs) -> float:
    """Server draw with every GPU at the platform's minimum cap."""
    dp = max(point.dp for point in candidates)
    return dp * (coeffs.alpha * config.GPUS_PER_NODE * spec.p_min_cap + coeffs.beta)


class _NodeCurve:
    """Predicted (power, throughput) of a node's candidates, cheapest first."""

    def __init__(self, demand: NodeDemand, predictor, coeffs: SystemPowerCoeffs):
        tput, gpu_power = predictor.predict_many(demand.model_id, demand.candidates)
        power = predicted_system_power(gpu_power, demand.candidates, coeffs)
        order = np.lexsort((-np.asarray(tput), power))
        self.power = power[order]
        self.tput = np.asarray(tput, dtype=float)[order]
        self.max_power = float(self.power.max())

    def best_throughput(self, budget: float) -> float:
        affordable = self.power <= budget + _POWER_TOL
        return float(self.tput[affordable].max()) if affordable.any() else 0.0

    def next_step(
        self, budget: float, cap_at: float, max_cost: float, quantum: float
    ) -> tuple[float, float, float] | None:
        """
        Best affordable upgrade from the current budget.

        Returns (cost in watts, throughput gain, gain per watt), with gains
        clipped at ``cap_at``, or None when nothing affordable helps.
        """
        current = min(self.best_throughput(budget), cap_at)
        best = None
        for power, tput in zip(self.power, self.tput):
            cost = float(power) - budget
            gain = min(float(tput), cap_at) - current
            if cost <= _POWER_TOL or cost > max_cost + _POWER_TOL or gain <= 0:
                continue
            rate = gain / max(cost, quantum)
            if best is None or rate > best[2]:
                best = (cost, gain, rate)
        return best


def allocate_budget(
    nodes: Sequence[NodeDemand],
    cluster_budget: float,
    predictor,
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs | None = None,
    quantum: float = config.WATER_FILL_QUANTUM,
) -> list[float]:
    """
    Split a cluster budget across nodes by water-filling.

    Every node starts at its floor (all GPUs at the minimum cap). Quanta go
    first to the node whose next candidate brings the most predicted
    throughput toward its QoS target per watt, then, once targets are met or
    unreachable, to the best marginal throughput per watt. Whatever is left
    is spread evenly over nodes still below their largest useful draw.

    Returns:
        list: Per-node budgets in watts, in input order; the sum never
        exceeds ``cluster_budget``.

    Raises:
        ConfigError: If the budget cannot cover every node's floor.
    """
    if not nodes:
        raise ConfigError("allocate_budget needs at least one node")
    if quantum <= 0:
        raise ConfigError(f"quantum must be positive, got {quantum}")
    coeffs = coeffs or SystemPowerCoeffs()

    floors = [node_floor(node.candidates, spec, coeffs) for node in nodes]
    if cluster_budget + _POWER_TOL < math.fsum(floors):
        listing = ", ".join(f"{n.model_id}={f:.0f}W" for n, f in zip(nodes, floors))
        raise ConfigError(
            f"cluster budget {cluster_budget:.0f} W is below the sum of node floors ({listing})"
        )

    curves = [_NodeCurve(node, predictor, coeffs) for node in nodes]
    ceilings = [max(curve.max_power, floor) for curve, floor in zip(curves, floors)]
    alloc = list(floors)
    remaining = cluster_budget - math.fsum(floors)

    def grant(i: int, watts: float) -> None:
        nonlocal remaining
        step = min(watts, remaining, ceilings[i] - alloc[i])
        alloc[i] += step
        remaining -= step

    for toward_target in (True, False):
        while remaining > _POWER_TOL:
            best, best_cost, best_rate = None, 0.0, 0.0
            for i, (node, curve) in enumerate(zip(nodes, curves)):
                cap_at = node.qos_target if toward_target else math.inf
                if toward_target and curve.best_throughput(alloc[i]) >= node.qos_target:
                    continue
                upgrade = curve.next_step(alloc[i], cap_at, remaining, quantum)
                if upgrade is not None and upgrade[2] > best_rate:
                    best, best_cost, best_rate = i, upgrade[0], upgrade[2]
            if best is None:
                break
            grant(best, math.ceil(best_cost / quantum - 1e-9) * quantum)

    # leftover: even water level over nodes with headroom
    while remaining > _POWER_TOL:
        open_nodes = [i for i in range(len(nodes)) if ceilings[i] - alloc[i] > _POWER_TOL]
        if not open_nodes:
            break
        share = remaining / len(open_nodes)
        for i in open_nodes:
            grant(i, share)
    return alloc


def pack_budget(
    nodes: Sequence[NodeDemand],
    cluster_budget: float,
    predictor,
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs | None = None,
    throughput_slack: float = config.TRACK_THROUGHPUT_SLACK,
) -> list[float]:
    """
    Split a budget that the cluster must follow rather than stay under.

    One candidate per node is chosen with total predicted power within the
    budget (a multiple-choice knapsack over whole watts). Among the packings
    whose predicted throughput is within ``throughput_slack`` of the best,
    the one drawing the most power wins. Each node gets its chosen point's
    power plus an even share of whatever the packing leaves over. If no
    combination fits, the budget is split evenly.

    Returns:
        list: Per-node budgets in watts, in input order, summing to ``cluster_budget``.

    Raises:
        ConfigError: If the budget cannot cover every node's floor.
    """
    if not nodes:
        raise ConfigError("pack_budget needs at least one node")
    coeffs = coeffs or SystemPowerCoeffs()
    floors = [node_floor(node.candidates, spec, coeffs) for node in nodes]
    if cluster_budget + _POWER_TOL < math.fsum(floors):
        raise ConfigError(
            f"cluster budget {cluster_budget:.0f} W is below the sum of node floors ({math.fsum(floors):.0f} W)"
        )

    capacity = int(math.floor(cluster_budget + _POWER_TOL))
    # best[w]: highest predicted throughput drawing exactly w watts
    best = np.full(capacity + 1, -np.inf)
    best[0] = 0.0
    choices = []
    for node in nodes:
        tput, gpu_power = predictor.predict_many(node.model_id, node.candidates)
        power = predicted_system_power(gpu_power, node.candidates, coeffs)
        costs = np.ceil(power - _POWER_TOL).astype(int)
        layer = np.full(capacity + 1, -np.inf)
        pick = np.full(capacity + 1, -1, dtype=int)
        for j, (cost, value) in enumerate(zip(costs, np.asarray(tput, dtype=float))):
            if cost > capacity:
                continue
            shifted = np.full(capacity + 1, -np.inf)
            shifted[cost:] = best[: capacity + 1 - cost] + value
            better = shifted > layer
            layer[better] = shifted[better]
            pick[better] = j
        best = layer
        choices.append((pick, costs, power))

    if not np.isfinite(best).any():
        return [cluster_budget / len(nodes)] * len(nodes)

    good_enough = best.max() * (1.0 - throughput_slack)
    w = int(np.flatnonzero(best >= good_enough)[-1])
    chosen = [0.0] * len(nodes)
    for i in range(len(nodes) - 1, -1, -1):
        pick, costs, power = choices[i]
        j = int(pick[w])
        chosen[i] = float(power[j])
        w -= int(costs[j])
    slack = (cluster_budget - math.fsum(chosen)) / len(nodes)
    return [p + slack for p in chosen]



@dataclass(frozen=True)
class BudgetTrace:
    """Piecewise-constant power budget: each value holds until the next timestamp."""

    times: tuple[float, ...]
    watts: tuple[float, ...]

    def __post_init__(self):
        if not self.times or len(self.times) != len(self.watts):
            raise ConfigError("budget trace needs matching, non-empty time and watt columns")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigError("budget trace timestamps must be strictly increasing")
        if any(w <= 0 for w in self.watts):
            raise ConfigError("budget trace values must be positive")

    def value_at(self, t: float) -> float:
        index = int(np.searchsorted(self.times, t + 1e-9, side="right")) - 1
        if index < 0:
            raise ConfigError(f"budget trace starts at {self.times[0]} s, after t={t}")
        return self.watts[index]

    def check_covers(self, duration: float) -> None:
        if self.times[0] > 0:
            raise ConfigError(
                f"budget trace must start at t=0 to cover a {duration} s run (starts at {self.times[0]})"
            )

    def scaled(self, factor: float) -> BudgetTrace:
        return BudgetTrace(self.times, tuple(w * factor for w in self.watts))

    @classmethod
    def constant(cls, watts: float) -> BudgetTrace:
        return cls((0.0,), (float(watts),))

    @classmethod
    def from_csv(cls, path: str | Path) -> BudgetTrace:
        path = Path(path)
        times, watts = [], []
        try:
            with open(path, newline="") as f:
                for row in csv.reader(f):
                    if not row or row[0].strip().startswith("#"):
                        continue
                    try:
                        t, w = float(row[0]), float(row[1])
                    except ValueError:
                        if not times:
                            continue  # header
                        raise
                    times.append(t)
                    watts.append(w)
        except FileNotFoundError as exc:
            raise ConfigError(f"budget trace not found: {path}") from exc
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"malformed budget trace {path}: {exc}") from exc
        return cls(tuple(times), tuple(watts))


@dataclass(frozen=True)
class TrackingRecord:
    t: float
    budget: float
    decision: Decision
    measured_power: float
    throughput: float

    @property
    def tracking_error(self) -> float:
        return self.measured_power - self.budget


def dr_track(
    budget_trace: BudgetTrace,
    controller: Controller,
    plant: Callable[[OperatingPoint, float], TelemetrySample],
    throughput_target: float,
    duration: float,
) -> list[TrackingRecord]:
    """
    Follow an external power signal with one node controller.

    Each interval the node budget is the trace value; the controller runs in
    budget-constrained mode and the plant reports what the applied point
    actually delivers. The cap applied at one interval takes effect in the
    next, as on real hardware.

    Args:
        budget_trace (BudgetTrace): Node-level budget over time.
        controller (Controller): Node controller, already configured.
        plant: ``plant(point, t)`` returning the telemetry for that interval.
        throughput_target (float): QoS target, tokens/s.
        duration (float): Seconds to simulate.

    Returns:
        list: One TrackingRecord per interval.
    """
    budget_trace.check_covers(duration)
    interval = controller.cfg.interval
    steps = int(round(duration / interval))
    records = []
    active = controller.current_point or controller.candidates[-1]
    for k in range(steps):
        t = (k + 1) * interval
        budget = budget_trace.value_at(k * interval)
        telemetry = plant(active, t)
        targets = Targets(
            throughput_target,
            power_budget=budget_trace.value_at(t),
            epsilon=controller.cfg.epsilon,
            track=True,
        )
        decision = controller.step(telemetry, targets, now=t)
        records.append(
            TrackingRecord(
                t=t,
                budget=budget,
                decision=decision,
                measured_power=telemetry.system_power,
                throughput=telemetry.throughput,
            )
        )
        active = controller.current_point
    return records
