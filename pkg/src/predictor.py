"""
Tree-ensemble regressor from operating points to throughput and GPU power.

Each target gets its own bootstrap forest of axis-aligned regression trees
with mean-valued leaves. Knob values come from a small discrete grid, so
split search works on per-feature value histograms rather than sorting.
A trained EnsembleModel is immutable and can be shared across threads.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

import config
from errors import ConfigError, DataError
from perf_model import OperatingPoint, SystemPowerCoeffs

KNOB_FEATURES = ("power_cap", "batch_size", "tp", "ep", "dp")
DERIVED_FEATURES = ("batch_per_tp",)
BASE_FEATURES = KNOB_FEATURES + DERIVED_FEATURES

TARGETS = ("throughput", "gpu_power", "efficiency")
DEFAULT_TARGETS = ("throughput", "gpu_power")


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = config.PREDICTOR_N_TREES
    max_depth: int = config.PREDICTOR_MAX_DEPTH
    min_leaf: int = config.PREDICTOR_MIN_LEAF

    def __post_init__(self):
        for name in ("n_trees", "max_depth", "min_leaf"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")

    def to_dict(self) -> dict[str, int]:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth, "min_leaf": self.min_leaf}

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> Hyperparams:
        if not data:
            return cls()
        unknown = set(data) - {"n_trees", "max_depth", "min_leaf"}
        if unknown:
            raise ConfigError(f"unknown predictor hyperparameters: {sorted(unknown)}")
        return cls(**{key: int(value) for key, value in data.items()})


@dataclass(frozen=True)
class FeatureVector:
    """An operating point tagged with the model it runs."""

    model_id: str
    point: OperatingPoint

    def as_array(self, model_ids: Sequence[str]) -> np.ndarray:
        return encode_points(model_ids, self.model_id, [self.point])[0]


@dataclass(frozen=True)
class PredictedMetrics:
    throughput_hat: float
    power_hat: float
    efficiency_hat: float


def feature_names(model_ids: Sequence[str]) -> tuple[str, ...]:
    return BASE_FEATURES + tuple(f"model={model_id}" for model_id in model_ids)


def encode_points(
    model_ids: Sequence[str], model_id: str, points: Sequence[OperatingPoint]
) -> np.ndarray:
    """
    Feature matrix for points of one model: knobs, batch per TP rank, one-hot model id.

    Raises:
        DataError: If the model id is not one the encoding knows.
    """
    if model_id not in model_ids:
        raise DataError(f"unknown model id '{model_id}' (known: {list(model_ids)})")
    n_base = len(BASE_FEATURES)
    matrix = np.zeros((len(points), n_base + len(model_ids)))
    if not points:
        return matrix
    knobs = np.array(
        [[p.power_cap, p.batch_size, p.tp, p.ep, p.dp] for p in points], dtype=float
    )
    matrix[:, : len(KNOB_FEATURES)] = knobs
    matrix[:, len(KNOB_FEATURES)] = knobs[:, 1] / knobs[:, 2]
    matrix[:, n_base + list(model_ids).index(model_id)] = 1.0
    return matrix


def record_target(record, target: str) -> float:
    if target == "throughput":
        return record.measured_throughput
    if target == "gpu_power":
        return record.measured_gpu_power
    if target == "efficiency":
        return record.measured_throughput / record.measured_sys_power
    raise ConfigError(f"unknown target '{target}' (choose from {TARGETS})")


@dataclass(frozen=True)
class RegressionTree:
    """Flat node arrays; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.depth):
            feat = self.feature[node]
            internal = np.flatnonzero(feat >= 0)
            if internal.size == 0:
                break
            at = node[internal]
            go_left = X[internal, feat[internal]] <= self.threshold[at]
            node[internal] = np.where(go_left, self.left[at], self.right[at])
        return self.value[node]

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RegressionTree:
        tree = cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=np.asarray(data["threshold"], dtype=float),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=float),
            depth=int(data["depth"]),
        )
        sizes = {len(tree.feature), len(tree.threshold), len(tree.left), len(tree.right), len(tree.value)}
        if len(sizes) != 1 or len(tree.feature) == 0:
            raise DataError("tree node arrays are empty or of unequal length")
        return tree


def _best_split(bins, weights, y, offsets, sizes, min_leaf):
    """
    Best variance-reducing split of one node.

    ``bins`` holds, per row and feature, the index of the row's value among
    that feature's training levels. Returns (feature, level index, gain) or
    None when no split reduces the weighted squared error.
    """
    total_w = weights.sum()
    centered = y - np.dot(weights, y) / total_w
    wy = weights * centered
    sse = np.dot(wy, centered)
    if sse <= 1e-12 * max(np.dot(weights, y * y), 1e-300):
        return None

    n_features = bins.shape[1]
    flat = (bins + offsets).ravel()
    total_bins = int(offsets[-1] + sizes[-1])
    hist_w = np.bincount(flat, weights=np.repeat(weights, n_features), minlength=total_bins)
    hist_s = np.bincount(flat, weights=np.repeat(wy, n_features), minlength=total_bins)

    cum_w = np.cumsum(hist_w)
    cum_s = np.cumsum(hist_s)
    start_w = np.repeat(np.concatenate(([0.0], cum_w))[offsets], sizes)
    start_s = np.repeat(np.concatenate(([0.0], cum_s))[offsets], sizes)
    left_w = cum_w - start_w
    left_s = cum_s - start_s
    right_w = total_w - left_w
    right_s = wy.sum() - left_s

    valid = (left_w >= min_leaf) & (right_w >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = left_s * left_s / left_w + right_s * right_s / right_w
    gain = np.where(valid, gain, -np.inf)
    best = int(np.argmax(gain))
    if gain[best] <= 1e-12 * sse:
        return None
    feature = int(np.searchsorted(offsets, best, side="right") - 1)
    return feature, best - int(offsets[feature]), float(gain[best])


def _grow_tree(X_bin, levels, offsets, sizes, y, counts, hyperparams, importance):
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), np.flatnonzero(counts), 0)]
    deepest = 0
    while stack:
        node, rows, depth = stack.pop()
        weights = counts[rows].astype(float)
        targets = y[rows]
        value[node] = float(np.dot(weights, targets) / weights.sum())
        deepest = max(deepest, depth)
        if depth >= hyperparams.max_depth or weights.sum() < 2 * hyperparams.min_leaf:
            continue
        split = _best_split(X_bin[rows], weights, targets, offsets, sizes, hyperparams.min_leaf)
        if split is None:
            continue
        f, level, gain = split
        importance[f] += gain
        feature[node] = f
        threshold[node] = 0.5 * (levels[f][level] + levels[f][level + 1])
        goes_left = X_bin[rows, f] <= level
        left_id, right_id = new_node(), new_node()
        left[node], right[node] = left_id, right_id
        stack.append((right_id, rows[~goes_left], depth + 1))
        stack.append((left_id, rows[goes_left], depth + 1))

    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float),
        depth=deepest,
    )


def _fit_forest(X, y, hyperparams, seed, target_index):
    levels = [np.unique(X[:, f]) for f in range(X.shape[1])]
    sizes = np.array([len(level) for level in levels], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
    X_bin = np.column_stack(
        [np.searchsorted(levels[f], X[:, f]) for f in range(X.shape[1])]
    ).astype(np.int64)

    n_rows = len(y)
    importance = np.zeros(X.shape[1])
    trees = []
    for tree_index in range(hyperparams.n_trees):
        rng = np.random.default_rng([seed, target_index, tree_index])
        counts = np.bincount(rng.integers(0, n_rows, n_rows), minlength=n_rows)
        trees.append(_grow_tree(X_bin, levels, offsets, sizes, y, counts, hyperparams, importance))
    total = importance.sum()
    if total > 0:
        importance = importance / total
    return trees, importance


@dataclass(frozen=True)
class EnsembleModel:
    """Trained forests, one per target, over a fixed model-id encoding."""

    model_ids: tuple[str, ...]
    hyperparams: Hyperparams
    seed: int
    forests: dict[str, list[RegressionTree]]
    importances: dict[str, np.ndarray]
    coeffs: SystemPowerCoeffs = field(default_factory=SystemPowerCoeffs)
    n_train: int = 0

    @property
    def feature_names(self) -> tuple[str, ...]:
        return feature_names(self.model_ids)

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(self.forests)

    def predict_target(
        self, model_id: str, points: Sequence[OperatingPoint], target: str
    ) -> np.ndarray:
        if target not in self.forests:
            raise DataError(f"target '{target}' was not trained (have {list(self.forests)})")
        X = encode_points(self.model_ids, model_id, points)
        if len(X) == 0:
            return np.zeros(0)
        trees = self.forests[target]
        return np.mean([tree.predict(X) for tree in trees], axis=0)

    def predict_many(
        self, model_id: str, points: Sequence[OperatingPoint]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Predicted (throughput, per-GPU power) arrays for a batch of candidates."""
        return (
            self.predict_target(model_id, points, "throughput"),
            self.predict_target(model_id, points, "gpu_power"),
        )


def train(
    records: Sequence,
    hyperparams: Hyperparams | None = None,
    seed: int = config.RANDOM_SEED,
    targets: Sequence[str] = DEFAULT_TARGETS,
    coeffs: SystemPowerCoeffs | None = None,
) -> EnsembleModel:
    """
    Fit one forest per target on profiling records.

    Rows are put in a canonical order before bootstrap sampling, so the
    result depends only on the set of records and the seed.

    Args:
        records: ProfilingRecord-like rows (point, model, measured values).
        hyperparams (Hyperparams, optional): Forest size and tree limits.
        seed (int): Bootstrap seed.
        targets: Which targets to fit; "efficiency" is optional.
        coeffs (SystemPowerCoeffs, optional): Used for derived efficiency.

    Returns:
        EnsembleModel: The trained ensemble.
    """
    if len(records) == 0:
        raise DataError("cannot train on an empty dataset")
    hyperparams = hyperparams or Hyperparams()
    for target in targets:
        if target not in TARGETS:
            raise ConfigError(f"unknown target '{target}' (choose from {TARGETS})")

    model_ids = tuple(sorted({record.model for record in records}))
    by_model: dict[str, list] = defaultdict(list)
    for record in records:
        by_model[record.model].append(record)
    X = np.vstack(
        [encode_points(model_ids, m, [r.point for r in by_model[m]]) for m in model_ids]
    )
    ordered = [r for m in model_ids for r in by_model[m]]
    labels = np.array([[record_target(r, t) for t in TARGETS] for r in ordered], dtype=float)
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(labels)):
        raise DataError("training data contains non-finite values")

    # canonical row order: features first, labels break ties
    keys = [labels[:, i] for i in reversed(range(labels.shape[1]))]
    keys += [X[:, f] for f in reversed(range(X.shape[1]))]
    order = np.lexsort(keys)
    X, labels = X[order], labels[order]

    forests = {}
    importances = {}
    for target in targets:
        target_index = TARGETS.index(target)
        forests[target], importances[target] = _fit_forest(
            X, labels[:, target_index], hyperparams, seed, target_index
        )
    return EnsembleModel(
        model_ids=model_ids,
        hyperparams=hyperparams,
        seed=seed,
        forests=forests,
        importances=importances,
        coeffs=coeffs or SystemPowerCoeffs(),
        n_train=len(records),
    )


def predict(model: EnsembleModel, vector: FeatureVector) -> PredictedMetrics:
    """Throughput, per-GPU power and the efficiency they imply at one point."""
    tput, power = model.predict_many(vector.model_id, [vector.point])
    sys_power = vector.point.dp * (
        model.coeffs.alpha * config.GPUS_PER_NODE * float(power[0]) + model.coeffs.beta
    )
    return PredictedMetrics(
        throughput_hat=float(tput[0]),
        power_hat=float(power[0]),
        efficiency_hat=float(tput[0]) / sys_power,
    )


def feature_importance(model: EnsembleModel, target: str = "efficiency") -> list[tuple[str, float]]:
    """Features ranked by normalized impurity decrease, largest first."""
    if target not in model.importances:
        raise DataError(f"no importances for target '{target}'; train with it included")
    scores = model.importances[target]
    names = model.feature_names
    # stable sort keeps feature order among equal scores
    order = sorted(range(len(names)), key=lambda i: -scores[i])
    return [(names[i], float(scores[i])) for i in order]


def _grouped_errors(model, heldout) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    if len(heldout) == 0:
        raise DataError("cannot evaluate on an empty holdout set")
    by_model: dict[str, list] = defaultdict(list)
    for record in heldout:
        by_model[record.model].append(record)
    errors = {}
    for model_id in sorted(by_model):
        rows = by_model[model_id]
        tput_hat, power_hat = model.predict_many(model_id, [r.point for r in rows])
        tput = np.array([r.measured_throughput for r in rows])
        power = np.array([r.measured_gpu_power for r in rows])
        errors[model_id] = (
            np.abs(np.asarray(tput_hat) - tput) / tput,
            np.abs(np.asarray(power_hat) - power) / power,
        )
    return errors


def evaluate_mape(model, heldout: Sequence) -> tuple[float, float]:
    """
    Pooled mean absolute percentage error over a holdout set.

    Args:
        model: Anything with ``predict_many(model_id, points)``.
        heldout: ProfilingRecord-like rows.

    Returns:
        tuple: (throughput MAPE, power MAPE) as fractions.
    """
    errors = _grouped_errors(model, heldout)
    tput = np.concatenate([e[0] for e in errors.values()])
    power = np.concatenate([e[1] for e in errors.values()])
    return float(tput.mean()), float(power.mean())


def evaluate_mape_by_model(model, heldout: Sequence) -> dict[str, tuple[float, float]]:
    return {
        model_id: (float(tput.mean()), float(power.mean()))
        for model_id, (tput, power) in _grouped_errors(model, heldout).items()
    }


def save_model(model: EnsembleModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": config.MODEL_FORMAT_VERSION,
        "model_ids": list(model.model_ids),
        "feature_names": list(model.feature_names),
        "hyperparams": model.hyperparams.to_dict(),
        "seed": model.seed,
        "n_train": model.n_train,
        "coeffs": {"alpha": model.coeffs.alpha, "beta": model.coeffs.beta},
        "targets": {
            target: {
                "importance": model.importances[target].tolist(),
                "trees": [tree.to_dict() for tree in trees],
            }
            for target, trees in model.forests.items()
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f)
    return path


def load_model(path: str | Path) -> EnsembleModel:
    path = Path(path)
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from exc

    version = payload.get("format_version")
    if version != config.MODEL_FORMAT_VERSION:
        raise DataError(
            f"model file {path} has format version {version}, "
            f"expected {config.MODEL_FORMAT_VERSION}"
        )
    try:
        model_ids = tuple(payload["model_ids"])
        if tuple(payload["feature_names"]) != feature_names(model_ids):
            raise DataError(f"model file {path} uses a different feature encoding")
        forests = {}
        importances = {}
        for target, body in payload["targets"].items():
            forests[target] = [RegressionTree.from_dict(tree) for tree in body["trees"]]
            importances[target] = np.asarray(body["importance"], dtype=float)
        return EnsembleModel(
            model_ids=model_ids,
            hyperparams=Hyperparams.from_dict(payload["hyperparams"]),
            seed=int(payload["seed"]),
            forests=forests,
            importances=importances,
            coeffs=SystemPowerCoeffs(**payload["coeffs"]),
            n_train=int(payload.get("n_train", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file {path}: {exc!r}") from exc
