"""
Analytic power and performance model of multi-GPU LLM inference.

Every function here is pure over frozen inputs, so the model can be evaluated
from many threads at once. It serves as the simulator's physics and as the
ground truth the predictor and controller are measured against.

Times are normalized: the absolute seconds are fixed by calibration and are
not claimed to be physical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

import config
from errors import CalibrationError, ConfigError, RangeError

PROFILE_SCHEMA_VERSION = 1

VALID_TPS = (1, 2, 4)
VALID_EPS = (1, 4, 8)
VALID_DPS = (1, 2, 3)

METRICS = ("throughput", "gpu_power", "system_power", "efficiency")


@dataclass(frozen=True)
class GpuSpec:
    """Platform power limits of one GPU type."""

    p_idle: float = 45.0
    p_max_cap: float = 400.0
    p_min_cap: float = 100.0
    f_max: float = 1.0
    name: str = "generic"

    def __post_init__(self):
        if not self.p_min_cap < self.p_max_cap:
            raise ConfigError(
                f"p_min_cap ({self.p_min_cap}) must be below p_max_cap ({self.p_max_cap})"
            )
        if self.p_idle < 0:
            raise ConfigError(f"p_idle must be non-negative, got {self.p_idle}")
        if self.f_max <= 0:
            raise ConfigError(f"f_max must be positive, got {self.f_max}")

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": PROFILE_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GpuSpec:
        try:
            return cls(
                p_idle=float(data["p_idle"]),
                p_max_cap=float(data["p_max_cap"]),
                p_min_cap=float(data["p_min_cap"]),
                f_max=float(data.get("f_max", 1.0)),
                name=str(data.get("name", "generic")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid GPU spec: {exc}") from exc


@dataclass(frozen=True)
class SystemPowerCoeffs:
    """Linear map from summed GPU power to server power: P_sys = alpha * sum + beta."""

    alpha: float = config.SYSTEM_POWER_ALPHA
    beta: float = config.SYSTEM_POWER_BETA

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class OperatingPoint:
    """One configuration of the hardware and software knobs."""

    power_cap: float
    batch_size: int
    tp: int = 1
    ep: int = 1
    dp: int = 1

    def validate(self, spec: GpuSpec, wide: bool = False) -> OperatingPoint:
        """
        Check the point against the platform range and the knob grid.

        Args:
            spec (GpuSpec): Platform limits.
            wide (bool): Accept parallel degrees outside the default grid.

        Returns:
            OperatingPoint: self, for chaining.
        """
        if not spec.p_min_cap <= self.power_cap <= spec.p_max_cap:
            raise RangeError(
                f"power cap {self.power_cap} W outside platform range "
                f"[{spec.p_min_cap}, {spec.p_max_cap}]"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if wide:
            if min(self.tp, self.ep, self.dp) < 1:
                raise ConfigError(f"parallel degrees must be >= 1: {self.label}")
            return self
        if self.tp not in VALID_TPS:
            raise ConfigError(f"tp must be one of {VALID_TPS}, got {self.tp}")
        if self.ep not in VALID_EPS:
            raise ConfigError(f"ep must be one of {VALID_EPS}, got {self.ep}")
        if self.dp not in VALID_DPS:
            raise ConfigError(f"dp must be one of {VALID_DPS}, got {self.dp}")
        return self

    @property
    def label(self) -> str:
        return f"{self.power_cap:.0f}W/b{self.batch_size}/tp{self.tp}/ep{self.ep}/dp{self.dp}"

    def sort_key(self) -> tuple:
        return (self.power_cap, self.batch_size, self.tp, self.ep, self.dp)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> OperatingPoint:
        return cls(
            power_cap=float(data["power_cap"]),
            batch_size=int(data["batch_size"]),
            tp=int(data.get("tp", 1)),
            ep=int(data.get("ep", 1)),
            dp=int(data.get("dp", 1)),
        )


@dataclass(frozen=True)
class StepTiming:
    t_comp: float
    t_comm: float
    t_step: float


@dataclass(frozen=True)
class ModelProfile:
    """Per-LLM calibration record making a simulated model compute- or communication-bound."""

    name: str
    total_params: float
    active_params: float
    n_experts: int
    top_k: int
    k0: float
    k1: float
    m0_tp: dict[int, float]
    m1: float
    node_penalty: float
    p_knee: float
    p_comp_demand0: float
    p_comp_demand1: float
    p_comm: float
    overlap: float
    deployment_tp: int = 1
    deployment_ep: int = 1
    deployment_dp: int = 1
    notes: str = field(default="", compare=False)

    def __post_init__(self):
        for attr in ("k0", "k1", "m1"):
            if getattr(self, attr) < 0:
                raise ConfigError(f"{self.name}: {attr} must be >= 0")
        if not self.m0_tp:
            raise ConfigError(f"{self.name}: m0_tp must map at least one TP degree")
        if any(value < 0 for value in self.m0_tp.values()):
            raise ConfigError(f"{self.name}: every m0_tp value must be >= 0")
        if self.node_penalty < 1:
            raise ConfigError(f"{self.name}: node_penalty must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"{self.name}: overlap must lie in [0, 1]")
        if self.n_experts < 0 or self.top_k < 0:
            raise ConfigError(f"{self.name}: expert counts must be >= 0")
        if self.deployment_tp not in self.m0_tp:
            raise ConfigError(f"{self.name}: deployment TP {self.deployment_tp} has no m0 entry")

    @property
    def is_moe(self) -> bool:
        return self.n_experts > 0

    def validate(self, spec: GpuSpec) -> ModelProfile:
        """Check the invariants that depend on the platform."""
        if not spec.p_min_cap <= self.p_knee <= spec.p_max_cap:
            raise ConfigError(
                f"{self.name}: p_knee {self.p_knee} outside [{spec.p_min_cap}, {spec.p_max_cap}]"
            )
        if self.p_comm < spec.p_idle:
            raise ConfigError(f"{self.name}: p_comm must be >= p_idle ({spec.p_idle})")
        return self

    def deployment_point(self, power_cap: float, batch_size: int) -> OperatingPoint:
        return OperatingPoint(
            power_cap=power_cap,
            batch_size=batch_size,
            tp=self.deployment_tp,
            ep=self.deployment_ep,
            dp=self.deployment_dp,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["m0_tp"] = {str(tp): value for tp, value in sorted(self.m0_tp.items())}
        data["deployment"] = {
            "tp": data.pop("deployment_tp"),
            "ep": data.pop("deployment_ep"),
            "dp": data.pop("deployment_dp"),
        }
        return {"schema_version": PROFILE_SCHEMA_VERSION, **data}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelProfile:
        try:
            version = int(data.get("schema_version", PROFILE_SCHEMA_VERSION))
            if version != PROFILE_SCHEMA_VERSION:
                raise ConfigError(f"unsupported profile schema version {version}")
            deployment = data.get("deployment", {})
            return cls(
                name=str(data["name"]),
                total_params=float(data["total_params"]),
                active_params=float(data["active_params"]),
                n_experts=int(data.get("n_experts", 0)),
                top_k=int(data.get("top_k", 0)),
                k0=float(data["k0"]),
                k1=float(data["k1"]),
                m0_tp={int(tp): float(value) for tp, value in data["m0_tp"].items()},
                m1=float(data["m1"]),
                node_penalty=float(data["node_penalty"]),
                p_knee=float(data["p_knee"]),
                p_comp_demand0=float(data["p_comp_demand0"]),
                p_comp_demand1=float(data["p_comp_demand1"]),
                p_comm=float(data["p_comm"]),
                overlap=float(data["overlap"]),
                deployment_tp=int(deployment.get("tp", 1)),
                deployment_ep=int(deployment.get("ep", 1)),
                deployment_dp=int(deployment.get("dp", 1)),
                notes=str(data.get("notes", "")),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"Invalid model profile: {exc!r}") from exc


@dataclass(frozen=True)
class PointMetrics:
    throughput: float
    gpu_power: float
    system_power: float
    efficiency: float
    timing: StepTiming


def effective_frequency(cap: float, spec: GpuSpec, profile: ModelProfile) -> float:
    """
    Normalized SM frequency reached under a power cap.

    Linear between the platform floor and the profile's knee, pinned at
    FLOOR_RATIO below and at f_max above the knee.
    """
    if not spec.p_min_cap <= cap <= spec.p_max_cap:
        raise RangeError(
            f"power cap {cap} W outside platform range [{spec.p_min_cap}, {spec.p_max_cap}]"
        )
    if profile.p_knee <= spec.p_min_cap:
        return spec.f_max
    ratio = (cap - spec.p_min_cap) / (profile.p_knee - spec.p_min_cap)
    return spec.f_max * min(max(ratio, config.FLOOR_RATIO), 1.0)


def floor_breakpoint(profile: ModelProfile, spec: GpuSpec) -> float:
    """Cap below which frequency sits on the floor and stops responding to the cap."""
    return spec.p_min_cap + config.FLOOR_RATIO * (profile.p_knee - spec.p_min_cap)


def step_timing(point: OperatingPoint, profile: ModelProfile, spec: GpuSpec) -> StepTiming:
    """Compute and communication time of one decode step."""
    if point.tp not in profile.m0_tp:
        raise ConfigError(
            f"{profile.name}: no communication cost for tp={point.tp} "
            f"(known: {sorted(profile.m0_tp)})"
        )
    freq = effective_frequency(point.power_cap, spec, profile)
    t_comp = (profile.k0 + profile.k1 * point.batch_size / point.tp) / freq
    t_comm = (profile.m0_tp[point.tp] + profile.m1 * point.batch_size) * (
        profile.node_penalty ** (point.dp - 1)
    )
    longer, shorter = max(t_comp, t_comm), min(t_comp, t_comm)
    return StepTiming(
        t_comp=t_comp,
        t_comm=t_comm,
        t_step=longer + (1.0 - profile.overlap) * shorter,
    )


def throughput(point: OperatingPoint, profile: ModelProfile, spec: GpuSpec) -> float:
    """
    Generated tokens per second.

    One token per sequence per decode step; batch_size is per data-parallel
    replica, so dp replicas multiply the rate.
    """
    timing = step_timing(point, profile, spec)
    return point.dp * point.batch_size / timing.t_step


def _phase_weighted_power(
    point: OperatingPoint, profile: ModelProfile, timing: StepTiming
) -> float:
    demand = profile.p_comp_demand0 + profile.p_comp_demand1 * point.batch_size / point.tp
    p_comp = min(point.power_cap, demand)
    p_comm = min(point.power_cap, profile.p_comm)
    return (
        timing.t_comp * p_comp + (timing.t_step - timing.t_comp) * p_comm
    ) / timing.t_step


def avg_gpu_power(point: OperatingPoint, profile: ModelProfile, spec: GpuSpec) -> float:
    """Average per-GPU draw over a decode step, weighting compute and communication phases."""
    return _phase_weighted_power(point, profile, step_timing(point, profile, spec))


def system_power(gpu_powers: Sequence[float], coeffs: SystemPowerCoeffs) -> float:
    """Server power from its GPU readings: alpha * sum + beta."""
    if len(gpu_powers) == 0:
        raise ConfigError("system_power needs at least one GPU reading")
    return coeffs.alpha * math.fsum(gpu_powers) + coeffs.beta


def gpu_count(point: OperatingPoint) -> int:
    """Every server powers all of its GPUs whatever the TP degree."""
    return config.GPUS_PER_NODE * point.dp


def point_system_power(
    point: OperatingPoint,
    profile: ModelProfile,
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs,
) -> float:
    per_gpu = avg_gpu_power(point, profile, spec)
    return point.dp * system_power([per_gpu] * config.GPUS_PER_NODE, coeffs)


def efficiency(
    point: OperatingPoint,
    profile: ModelProfile,
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs,
) -> float:
    """Tokens per joule of system energy."""
    return throughput(point, profile, spec) / point_system_power(point, profile, spec, coeffs)


def evaluate(
    point: OperatingPoint,
    profile: ModelProfile,
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs,
) -> PointMetrics:
    """All model outputs for one point, sharing a single timing evaluation."""
    timing = step_timing(point, profile, spec)
    tput = point.dp * point.batch_size / timing.t_step
    gpu_power = _phase_weighted_power(point, profile, timing)
    sys_power = point.dp * system_power([gpu_power] * config.GPUS_PER_NODE, coeffs)
    return PointMetrics(
        throughput=tput,
        gpu_power=gpu_power,
        system_power=sys_power,
        efficiency=tput / sys_power,
        timing=timing,
    )


def is_feasible(point: OperatingPoint, profile: ModelProfile) -> tuple[bool, str]:
    """
    Whether a profile can be deployed at this point.

    Returns:
        tuple: (feasible, reason); reason is empty when feasible.
    """
    if point.tp not in profile.m0_tp:
        return False, f"tp={point.tp} not characterized"
    if not profile.is_moe and point.ep > 1:
        return False, f"ep={point.ep} on a dense model"
    if profile.is_moe and point.ep > profile.n_experts:
        return False, f"ep={point.ep} exceeds {profile.n_experts} experts"
    return True, ""


class AnalyticModel:
    """
    Prediction interface backed by the analytic model itself.

    The oracle policy and the allocator checks use it in place of a trained
    ensemble.
    """

    def __init__(
        self,
        registry: dict[str, ModelProfile],
        spec: GpuSpec,
        coeffs: SystemPowerCoeffs | None = None,
    ):
        self.registry = registry
        self.spec = spec
        self.coeffs = coeffs or SystemPowerCoeffs()

    def predict_many(
        self, model_id: str, points: Sequence[OperatingPoint]
    ) -> tuple[np.ndarray, np.ndarray]:
        if model_id not in self.registry:
            raise ConfigError(f"unknown profile '{model_id}'")
        profile = self.registry[model_id]
        results = [evaluate(point, profile, self.spec, self.coeffs) for point in points]
        return (
            np.array([r.throughput for r in results], dtype=float),
            np.array([r.gpu_power for r in results], dtype=float),
        )


# Calibration

CALIBRATION_PARAMS = (
    "k0",
    "k1",
    "m0_tp",
    "m1",
    "p_knee",
    "node_penalty",
    "p_comm",
    "p_comp_demand0",
    "p_comp_demand1",
)


@dataclass(frozen=True)
class Anchor:
    """A target value for one model metric at one operating point."""

    point: OperatingPoint
    metric: str
    target: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"unknown anchor metric '{self.metric}', expected one of {METRICS}")
        if self.target <= 0:
            raise ConfigError("anchor targets must be positive")


def _expand_params(template: ModelProfile, free: Iterable[str] | None) -> list[str]:
    names = []
    for name in free or CALIBRATION_PARAMS:
        if name == "m0_tp":
            names.extend(f"m0_tp[{tp}]" for tp in sorted(template.m0_tp))
        elif name.startswith("m0_tp[") or name in CALIBRATION_PARAMS:
            names.append(name)
        else:
            raise ConfigError(f"'{name}' is not a calibratable coefficient")
    return names


def _get_param(profile: ModelProfile, name: str) -> float:
    if name.startswith("m0_tp["):
        return profile.m0_tp[int(name[6:-1])]
    return getattr(profile, name)


def _set_param(profile: ModelProfile, name: str, value: float, spec: GpuSpec) -> ModelProfile:
    if name.startswith("m0_tp["):
        m0 = dict(profile.m0_tp)
        m0[int(name[6:-1])] = max(value, 0.0)
        return replace(profile, m0_tp=m0)
    if name == "p_knee":
        value = min(max(value, spec.p_min_cap), spec.p_max_cap)
    elif name == "node_penalty":
        value = max(value, 1.0)
    elif name == "p_comm":
        value = max(value, spec.p_idle)
    return replace(profile, **{name: max(value, 0.0)})


def _anchor_residuals(
    profile: ModelProfile,
    anchors: Sequence[Anchor],
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs,
) -> np.ndarray:
    values = []
    for anchor in anchors:
        metrics = evaluate(anchor.point, profile, spec, coeffs)
        values.append((getattr(metrics, anchor.metric) - anchor.target) / anchor.target)
    return np.array(values, dtype=float)


def calibrate(
    template: ModelProfile,
    anchors: Sequence[Anchor],
    spec: GpuSpec,
    coeffs: SystemPowerCoeffs | None = None,
    free: Iterable[str] | None = None,
    seed: int = config.RANDOM_SEED,
    tol: float = 0.05,
    max_sweeps: int = 400,
) -> ModelProfile:
    """
    Fit free coefficients so the model reproduces the anchors.

    Coordinate descent on log-scaled coefficients minimizing the sum of
    squared relative errors. The visiting order is shuffled per sweep from
    ``seed``, so the result is deterministic for a given seed.

    Args:
        template (ModelProfile): Starting profile; non-free fields are kept.
        anchors (list): Anchor targets, at least one per free coefficient.
        spec (GpuSpec): Platform limits.
        coeffs (SystemPowerCoeffs, optional): System power coefficients.
        free (list, optional): Coefficient names to fit. Defaults to all.
        seed (int): Seed for the visiting order.
        tol (float): Maximum relative error accepted on every anchor.
        max_sweeps (int): Iteration bound.

    Returns:
        ModelProfile: The calibrated profile.
    """
    coeffs = coeffs or SystemPowerCoeffs()
    params = _expand_params(template, free)
    if len(anchors) < len(params):
        raise ConfigError(
            f"calibration is underdetermined: {len(anchors)} anchors for {len(params)} coefficients"
        )

    def loss_of(profile: ModelProfile) -> tuple[float, np.ndarray]:
        try:
            residuals = _anchor_residuals(profile, anchors, spec, coeffs)
        except ConfigError:
            return math.inf, np.full(len(anchors), math.inf)
        return float(np.sum(residuals**2)), residuals

    current = template
    best_loss, residuals = loss_of(current)
    if np.max(np.abs(residuals)) <= 1e-12:
        return template

    rng = np.random.default_rng(seed)
    steps = {name: 0.2 for name in params}
    for _ in range(max_sweeps):
        if np.max(np.abs(residuals)) <= tol:
            return current
        for index in rng.permutation(len(params)):
            name = params[index]
            value = _get_param(current, name)
            if value == 0.0:
                continue
            moved = False
            for direction in (1.0, -1.0):
                candidate = _set_param(
                    current, name, value * math.exp(direction * steps[name]), spec
                )
                candidate_loss, candidate_residuals = loss_of(candidate)
                if candidate_loss < best_loss:
                    current, best_loss, residuals = candidate, candidate_loss, candidate_residuals
                    moved = True
                    break
            if not moved:
                steps[name] *= 0.5
        if max(steps.values()) < 1e-9:
            break

    if np.max(np.abs(residuals)) <= tol:
        return current
    raise CalibrationError(
        f"{template.name}: calibration stopped with max relative error "
        f"{float(np.max(np.abs(residuals))):.4f} > {tol}",
        residuals={
            f"{a.metric}@{a.point.label}": float(r) for a, r in zip(anchors, residuals)
        },
    )


# Profile files


def load_gpu_spec(path: str | Path = config.GPU_SPEC_FILE) -> GpuSpec:
    try:
        with open(path) as f:
            return GpuSpec.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read GPU spec {path}: {exc}") from exc


def load_profile_file(path: str | Path) -> ModelProfile:
    try:
        with open(path) as f:
            return ModelProfile.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read profile {path}: {exc}") from exc


def save_profile(profile: ModelProfile, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(profile.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_registry(
    directory: str | Path = config.PROFILE_DIR, spec: GpuSpec | None = None
) -> dict[str, ModelProfile]:
    """Load every shipped profile, keyed by name in sorted order."""
    registry = {}
    for path in sorted(Path(directory).glob("*.json")):
        profile = load_profile_file(path)
        if spec is not None:
            profile.validate(spec)
        registry[profile.name] = profile
    if not registry:
        raise ConfigError(f"No profiles found in {directory}")
    return dict(sorted(registry.items()))


def load_profile(
    name: str, directory: str | Path = config.PROFILE_DIR, spec: GpuSpec | None = None
) -> ModelProfile:
    registry = load_registry(directory, spec)
    if name not in registry:
        raise ConfigError(f"Unknown profile '{name}'. Available: {', '.join(registry)}")
    return registry[name]
