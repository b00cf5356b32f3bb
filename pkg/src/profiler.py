"""
Offline sweep engine producing the profiling dataset the predictor trains on.

A backend is anything with ``measure(point, profile, window, rng)`` returning
``(throughput, gpu_power, sys_power)``. The default backend is the analytic
model with multiplicative Gaussian measurement noise.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

import config
from errors import BackendError, ConfigError, DataError
from perf_model import (
    GpuSpec,
    ModelProfile,
    OperatingPoint,
    SystemPowerCoeffs,
    evaluate,
    is_feasible,
    system_power,
)

CSV_HEADER = (
    "model",
    "power_cap",
    "batch_size",
    "tp",
    "ep",
    "dp",
    "measured_throughput",
    "measured_gpu_power",
    "measured_sys_power",
    "duration",
)


@dataclass(frozen=True)
class SweepGrid:
    """Knob values to sweep; every combination is one candidate point."""

    caps: tuple[float, ...] = tuple(config.SWEEP_CAPS)
    batches: tuple[int, ...] = tuple(config.SWEEP_BATCHES)
    tps: tuple[int, ...] = tuple(config.SWEEP_TPS)
    eps: tuple[int, ...] = tuple(config.SWEEP_EPS)
    dps: tuple[int, ...] = tuple(config.SWEEP_DPS)

    def __post_init__(self):
        for name in ("caps", "batches", "tps", "eps", "dps"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigError(f"sweep grid '{name}' must not be empty")
            object.__setattr__(self, name, values)

    @property
    def size(self) -> int:
        return len(self.caps) * len(self.batches) * len(self.tps) * len(self.eps) * len(self.dps)

    def points(self) -> list[OperatingPoint]:
        """All candidate points in canonical order."""
        return [
            OperatingPoint(power_cap=float(cap), batch_size=int(batch), tp=tp, ep=ep, dp=dp)
            for cap in self.caps
            for batch in self.batches
            for tp in self.tps
            for ep in self.eps
            for dp in self.dps
        ]

    def validate(self, spec: GpuSpec) -> SweepGrid:
        for point in self.points():
            point.validate(spec, wide=True)
        return self

    def to_dict(self) -> dict[str, list]:
        return {
            "caps": list(self.caps),
            "batches": list(self.batches),
            "tps": list(self.tps),
            "eps": list(self.eps),
            "dps": list(self.dps),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepGrid:
        defaults = cls()
        try:
            return cls(
                caps=tuple(float(v) for v in data.get("caps", defaults.caps)),
                batches=tuple(int(v) for v in data.get("batches", defaults.batches)),
                tps=tuple(int(v) for v in data.get("tps", defaults.tps)),
                eps=tuple(int(v) for v in data.get("eps", defaults.eps)),
                dps=tuple(int(v) for v in data.get("dps", defaults.dps)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid sweep grid: {exc}") from exc


def load_grid(path: str | Path | None) -> SweepGrid:
    """Read a grid file; None gives the default knob grid."""
    if path is None:
        return SweepGrid()
    try:
        with open(path) as f:
            return SweepGrid.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read grid file {path}: {exc}") from exc


@dataclass(frozen=True)
class ProfilingRecord:
    point: OperatingPoint
    model: str
    measured_throughput: float
    measured_gpu_power: float
    measured_sys_power: float
    duration: float

    def to_row(self) -> list:
        return [
            self.model,
            repr(float(self.point.power_cap)),
            self.point.batch_size,
            self.point.tp,
            self.point.ep,
            self.point.dp,
            repr(float(self.measured_throughput)),
            repr(float(self.measured_gpu_power)),
            repr(float(self.measured_sys_power)),
            repr(float(self.duration)),
        ]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> ProfilingRecord:
        try:
            return cls(
                point=OperatingPoint(
                    power_cap=float(row["power_cap"]),
                    batch_size=int(row["batch_size"]),
                    tp=int(row["tp"]),
                    ep=int(row["ep"]),
                    dp=int(row["dp"]),
                ),
                model=row["model"],
                measured_throughput=float(row["measured_throughput"]),
                measured_gpu_power=float(row["measured_gpu_power"]),
                measured_sys_power=float(row["measured_sys_power"]),
                duration=float(row["duration"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Malformed dataset row {row}: {exc}") from exc


@dataclass
class Dataset:
    """Profiling records plus the sweep metadata kept in the JSON sidecar."""

    records: list[ProfilingRecord]
    models: list[str] = field(default_factory=list)
    grid: SweepGrid | None = None
    seed: int | None = None
    noise_sigma: float | None = None
    complete: bool = True
    skipped: int = 0
    outliers: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def sidecar(self) -> dict[str, Any]:
        return {
            "models": self.models,
            "grid": self.grid.to_dict() if self.grid else None,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "complete": self.complete,
            "records": len(self.records),
            "skipped": self.skipped,
            "outliers": self.outliers,
        }


class SimulatedBackend:
    """Measures points on the analytic model with multiplicative Gaussian noise."""

    def __init__(
        self,
        spec: GpuSpec,
        coeffs: SystemPowerCoeffs | None = None,
        sigma: float = config.NOISE_SIGMA,
        sys_sigma: float = config.SYS_POWER_NOISE_SIGMA,
        bound: float = config.OUTLIER_BOUND,
    ):
        self.spec = spec
        self.coeffs = coeffs or SystemPowerCoeffs()
        self.sigma = sigma
        self.sys_sigma = sys_sigma
        self.bound = bound
        self.clipped = 0
        self._lock = threading.Lock()

    def _factor(self, rng: np.random.Generator, sigma: float) -> float:
        if sigma <= 0:
            return 1.0
        draw = float(rng.normal(0.0, sigma))
        if abs(draw) > self.bound:
            with self._lock:
                self.clipped += 1
            draw = float(np.clip(draw, -self.bound, self.bound))
        return 1.0 + draw

    def measure(
        self,
        point: OperatingPoint,
        profile: ModelProfile,
        window: float,
        rng: np.random.Generator,
    ) -> tuple[float, float, float]:
        try:
            metrics = evaluate(point, profile, self.spec, self.coeffs)
        except ConfigError as exc:
            raise BackendError(f"cannot measure {point.label}: {exc}") from exc
        tput = metrics.throughput * self._factor(rng, self.sigma)
        gpu_power = metrics.gpu_power * self._factor(rng, self.sigma)
        sys_power = point.dp * system_power([gpu_power] * config.GPUS_PER_NODE, self.coeffs)
        sys_power *= self._factor(rng, self.sys_sigma)
        return tput, gpu_power, sys_power


def _point_rng(seed: int, model: str, index: int) -> np.random.Generator:
    # one substream per (model, grid index) keeps results independent of scheduling
    return np.random.default_rng([seed, zlib.crc32(model.encode()), index])


def run_sweep(
    grid: SweepGrid,
    profile: ModelProfile,
    backend,
    noise_seed: int = config.RANDOM_SEED,
    window: float = config.SWEEP_WINDOW_SECONDS,
    max_workers: int = 1,
    logger=None,
) -> Dataset:
    """
    Measure every feasible grid point of one model.

    Args:
        grid (SweepGrid): Knob values.
        profile (ModelProfile): Model to sweep.
        backend: Measurement backend.
        noise_seed (int): Seed for measurement noise.
        window (float): Simulated measurement window per point, seconds.
        max_workers (int): Worker threads; 1 runs sequentially.
        logger (RunLogger, optional): Receives skip and progress messages.

    Returns:
        Dataset: Records in canonical grid order. ``complete`` is False when
        the backend failed part way through.
    """
    spec = getattr(backend, "spec", None)
    if spec is not None:
        grid.validate(spec)

    points = grid.points()
    feasible: list[tuple[int, OperatingPoint]] = []
    skipped = 0
    for index, point in enumerate(points):
        ok, reason = is_feasible(point, profile)
        if ok:
            feasible.append((index, point))
        else:
            skipped += 1
            if logger:
                logger.log_profile_issue(profile.name, "infeasible", f"{point.label}: {reason}")

    clipped_before = getattr(backend, "clipped", 0)

    def measure_one(index: int, point: OperatingPoint) -> ProfilingRecord:
        tput, gpu_power, sys_power = backend.measure(
            point, profile, window, _point_rng(noise_seed, profile.name, index)
        )
        return ProfilingRecord(
            point=point,
            model=profile.name,
            measured_throughput=tput,
            measured_gpu_power=gpu_power,
            measured_sys_power=sys_power,
            duration=window,
        )

    results: dict[int, ProfilingRecord] = {}
    complete = True
    if max_workers > 1 and len(feasible) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
            future_to_index = {
                executor.submit(measure_one, index, point): index for index, point in feasible
            }
            for future in concurrent.futures.as_completed(future_to_index):
                index = future_to_index[future]
                try:
                    results[index] = future.result()
                except Exception as e:
                    complete = False
                    if logger:
                        logger.error(f"[{profile.name}] backend failed at grid index {index}: {e}")
    else:
        for done, (index, point) in enumerate(feasible, start=1):
            try:
                results[index] = measure_one(index, point)
            except Exception as e:
                complete = False
                if logger:
                    logger.error(f"[{profile.name}] backend failed at {point.label}: {e}")
                break
            if logger and done % 200 == 0:
                logger.sweep_progress(profile.name, done, len(feasible))

    outliers = getattr(backend, "clipped", 0) - clipped_before
    if outliers and logger:
        logger.log_profile_issue(profile.name, "outlier", f"{outliers} noise draws clipped at 5 sigma")

    return Dataset(
        records=[results[index] for index in sorted(results)],
        models=[profile.name],
        grid=grid,
        seed=noise_seed,
        noise_sigma=getattr(backend, "sigma", None),
        complete=complete,
        skipped=skipped,
        outliers=outliers,
    )


def split_holdout(
    records: Sequence[ProfilingRecord], fraction: float, seed: int = config.RANDOM_SEED
) -> tuple[list[ProfilingRecord], list[ProfilingRecord]]:
    """
    Stratified train/held-out split.

    Each model's records are permuted under (seed, model) and the first
    round(fraction * n) go to the held-out set. Both outputs keep input order.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {fraction}")

    by_model: dict[str, list[int]] = {}
    for position, record in enumerate(records):
        by_model.setdefault(record.model, []).append(position)

    heldout_positions = set()
    for model in sorted(by_model):
        positions = by_model[model]
        n_hold = int(round(fraction * len(positions)))
        order = np.random.default_rng([seed, zlib.crc32(model.encode())]).permutation(len(positions))
        heldout_positions.update(positions[i] for i in order[:n_hold])

    train = [r for i, r in enumerate(records) if i not in heldout_positions]
    heldout = [r for i, r in enumerate(records) if i in heldout_positions]
    return train, heldout


@dataclass(frozen=True)
class SystemPowerFit:
    coeffs: SystemPowerCoeffs
    r_squared: float
    mae: float


def fit_system_power(records: Sequence[ProfilingRecord]) -> SystemPowerFit:
    """Least-squares fit of per-server system power against summed GPU power."""
    if len(records) < 2:
        raise DataError("need at least two records to fit system power")
    gpu_sum = np.array([config.GPUS_PER_NODE * r.measured_gpu_power for r in records])
    per_server = np.array([r.measured_sys_power / r.point.dp for r in records])
    design = np.column_stack([gpu_sum, np.ones_like(gpu_sum)])
    (alpha, beta), *_ = np.linalg.lstsq(design, per_server, rcond=None)
    fitted = design @ np.array([alpha, beta])
    residual = per_server - fitted
    total = float(np.sum((per_server - per_server.mean()) ** 2))
    r_squared = 1.0 - float(np.sum(residual**2)) / total if total > 0 else 1.0
    return SystemPowerFit(
        coeffs=SystemPowerCoeffs(alpha=float(alpha), beta=float(beta)),
        r_squared=r_squared,
        mae=float(np.mean(np.abs(residual))),
    )


def write_dataset(dataset: Dataset, path: str | Path) -> tuple[Path, Path]:
    """Write the CSV and its JSON sidecar; returns both paths."""
    csv_path = Path(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for record in dataset.records:
            writer.writerow(record.to_row())
    sidecar_path = csv_path.with_suffix(".json")
    with open(sidecar_path, "w") as f:
        json.dump(dataset.sidecar(), f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, sidecar_path


def read_dataset(path: str | Path) -> Dataset:
    csv_path = Path(path)
    try:
        with open(csv_path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_HEADER:
                raise DataError(f"{csv_path}: unexpected header {reader.fieldnames}")
            records = [ProfilingRecord.from_row(row) for row in reader]
    except OSError as exc:
        raise DataError(f"Cannot read dataset {csv_path}: {exc}") from exc

    meta: dict[str, Any] = {}
    sidecar_path = csv_path.with_suffix(".json")
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            meta = json.load(f)
    return Dataset(
        records=records,
        models=meta.get("models") or sorted({r.model for r in records}),
        grid=SweepGrid.from_dict(meta["grid"]) if meta.get("grid") else None,
        seed=meta.get("seed"),
        noise_sigma=meta.get("noise_sigma"),
        complete=meta.get("complete", True),
        skipped=meta.get("skipped", 0),
        outliers=meta.get("outliers", 0),
    )


def merge_datasets(datasets: Sequence[Dataset]) -> Dataset:
    records = [record for dataset in datasets for record in dataset.records]
    models = sorted({model for dataset in datasets for model in dataset.models})
    return Dataset(
        records=records,
        models=models,
        complete=all(dataset.complete for dataset in datasets),
        skipped=sum(dataset.skipped for dataset in datasets),
        outliers=sum(dataset.outliers for dataset in datasets),
    )
