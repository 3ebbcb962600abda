"""Linear SVM head and persistence of the full detector model.

Training minimizes the L2-regularized hinge loss with deterministic
stochastic subgradient descent (step size 1/(lambda * t), shuffling driven
by the key-stream generator), so identical inputs always give identical
weights.  The deployable artifact bundles the selection plan, band
partition, integration mode, enhancement state and SVM parameters into a
versioned JSON document whose floats are serialized as decimal strings
with 17 significant digits (enough to round-trip doubles exactly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateError, FormatError, ShapeError, VersionError
from .features import BandPartition, EnhancementState, FeatureVector
from .keyed_selection import SelectionPlan, SplitMix64
from .krawtchouk import SpatialConfig

MODEL_FORMAT_VERSION = 1

#: All schedules use the 1/(lambda*t) step; they differ in which model the
#: trainer returns.  "pegasos" keeps the last iterate, "pegasos-best"
#: (default) the epoch-boundary iterate with the lowest training objective,
#: "pegasos-avg" the average of the iterates over the last quarter of
#: epochs.  The two latter variants damp the tail oscillation of the
#: subgradient path on non-separable data.
SCHEDULES = ("pegasos", "pegasos-best", "pegasos-avg")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the SVM subgradient training."""

    regularization: float = 1e-4
    epochs: int = 50
    schedule: str = "pegasos-best"
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.regularization <= 0.0:
            raise ConfigError(f"regularization must be > 0, got {self.regularization}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True, eq=False)
class SvmModel:
    """Trained linear decision function w . v + b."""

    weights: np.ndarray
    bias: float
    train_config: TrainConfig
    epoch_objectives: tuple = ()


def _as_matrix(features) -> np.ndarray:
    rows = [fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=float)
            for fv in features]
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise ShapeError(f"feature dimensions differ: {sorted(dims)}")
    return np.vstack(rows)


def hinge_objective(weights: np.ndarray, bias: float, matrix: np.ndarray,
                    targets: np.ndarray, regularization: float) -> float:
    margins = targets * (matrix @ weights + bias)
    hinge = np.maximum(0.0, 1.0 - margins).mean()
    return float(0.5 * regularization * weights @ weights + hinge)


def train_svm(features, labels, config: TrainConfig = TrainConfig()) -> SvmModel:
    """Deterministic subgradient training of the linear SVM.

    Labels are 0 (clean) / 1 (adversarial), mapped internally to -1/+1.
    ``epoch_objectives`` records, per epoch boundary, the training
    objective of the model that would be returned if training stopped
    there; under the default "pegasos-best" schedule this sequence is
    non-increasing by construction.
    """
    matrix = _as_matrix(features)
    y = np.asarray(labels, dtype=int)
    if len(y) != matrix.shape[0]:
        raise ShapeError(f"{matrix.shape[0]} feature rows vs {len(y)} labels")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateError("training needs at least one example per class")
    if not set(classes.tolist()) <= {0, 1}:
        raise ConfigError(f"detector labels must be 0 or 1, got {classes.tolist()}")

    targets = np.where(y == 1, 1.0, -1.0)
    lam = config.regularization
    count, dim = matrix.shape
    weights = np.zeros(dim)
    bias = 0.0
    stream = SplitMix64(config.shuffle_seed)
    step = 1
    objectives = []
    averaging_from = (config.epochs - max(1, config.epochs // 4)
                      if config.schedule == "pegasos-avg" else config.epochs)
    avg_weights = np.zeros(dim)
    avg_bias = 0.0
    averaged = 0
    best = None
    best_objective = np.inf
    for epoch in range(config.epochs):
        order = list(range(count))
        stream.shuffle(order)
        for i in order:
            eta = 1.0 / (lam * step)
            margin = targets[i] * (matrix[i] @ weights + bias)
            weights *= 1.0 - eta * lam
            if margin < 1.0:
                weights += eta * targets[i] * matrix[i]
                bias += eta * targets[i]
            step += 1
        objective = hinge_objective(weights, bias, matrix, targets, lam)
        if config.schedule == "pegasos-best":
            if objective < best_objective:
                best_objective = objective
                best = (weights.copy(), bias)
            objectives.append(best_objective)
        elif config.schedule == "pegasos-avg" and epoch >= averaging_from:
            avg_weights += weights
            avg_bias += bias
            averaged += 1
            objectives.append(hinge_objective(avg_weights / averaged,
                                              avg_bias / averaged,
                                              matrix, targets, lam))
        else:
            objectives.append(objective)
    if config.schedule == "pegasos-best":
        weights, bias = best
    elif averaged:
        weights = avg_weights / averaged
        bias = avg_bias / averaged
    return SvmModel(weights=weights, bias=bias, train_config=config,
                    epoch_objectives=tuple(objectives))


def predict(model: SvmModel, feature) -> tuple[int, float]:
    """Return (label, margin); margin ties resolve to clean (label 0)."""
    values = feature.values if isinstance(feature, FeatureVector) else np.asarray(feature, dtype=float)
    if len(values) != len(model.weights):
        raise ShapeError(
            f"feature dimension {len(values)} does not match model "
            f"dimension {len(model.weights)}"
        )
    margin = float(model.weights @ values + model.bias)
    return (1 if margin > 0.0 else 0), margin


@dataclass(frozen=True, eq=False)
class DetectorModel:
    """Everything needed to run the detector: the deployable artifact."""

    key_fingerprint: int
    plan: SelectionPlan
    partition: BandPartition
    mode: str
    enhancement: EnhancementState | None
    svm: SvmModel
    format_version: int = MODEL_FORMAT_VERSION


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_list(values) -> list:
    return [_fmt(v) for v in np.asarray(values, dtype=float).ravel()]


def _parse_list(values) -> np.ndarray:
    return np.array([float(v) for v in values], dtype=float)


def model_to_document(model: DetectorModel) -> dict:
    """JSON-ready dict with a fixed field order."""
    enhancement = None
    if model.enhancement is not None:
        enhancement = {
            "weights": None if model.enhancement.weights is None
            else _fmt_list(model.enhancement.weights),
            "keep_mask": [bool(b) for b in model.enhancement.keep_mask],
            "mean": _fmt_list(model.enhancement.mean),
            "std": _fmt_list(model.enhancement.std),
        }
    return {
        "format_version": model.format_version,
        "key_fingerprint": f"{model.key_fingerprint:016x}",
        "plan": {
            "retained_configs": [[_fmt(c.px), _fmt(c.py)]
                                 for c in model.plan.retained_configs],
            "order_mask": [[n, m] for n, m in model.plan.order_mask],
            "key_fingerprint": f"{model.plan.key_fingerprint:016x}",
        },
        "partition": {
            "num_bands": model.partition.num_bands,
            "width": model.partition.width,
            "height": model.partition.height,
        },
        "mode": model.mode,
        "enhancement": enhancement,
        "svm": {
            "weights": _fmt_list(model.svm.weights),
            "bias": _fmt(model.svm.bias),
            "train_config": {
                "regularization": _fmt(model.svm.train_config.regularization),
                "epochs": model.svm.train_config.epochs,
                "schedule": model.svm.train_config.schedule,
                "shuffle_seed": model.svm.train_config.shuffle_seed,
            },
        },
    }


def save_model(model: DetectorModel, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(model_to_document(model), fh, indent=1)
        fh.write("\n")


def model_from_document(doc: dict) -> DetectorModel:
    try:
        version = doc["format_version"]
    except (TypeError, KeyError) as exc:
        raise FormatError("model document has no format_version") from exc
    if version != MODEL_FORMAT_VERSION:
        raise VersionError(
            f"unsupported model format_version {version}, expected {MODEL_FORMAT_VERSION}"
        )
    try:
        plan = SelectionPlan(
            retained_configs=tuple(
                SpatialConfig(float(px), float(py))
                for px, py in doc["plan"]["retained_configs"]
            ),
            order_mask=tuple((int(n), int(m)) for n, m in doc["plan"]["order_mask"]),
            key_fingerprint=int(doc["plan"]["key_fingerprint"], 16),
        )
        partition = BandPartition(
            num_bands=int(doc["partition"]["num_bands"]),
            width=int(doc["partition"]["width"]),
            height=int(doc["partition"]["height"]),
        )
        enhancement = None
        if doc["enhancement"] is not None:
            enh = doc["enhancement"]
            enhancement = EnhancementState(
                weights=None if enh["weights"] is None else _parse_list(enh["weights"]),
                keep_mask=np.array([bool(b) for b in enh["keep_mask"]], dtype=bool),
                mean=_parse_list(enh["mean"]),
                std=_parse_list(enh["std"]),
            )
        tc = doc["svm"]["train_config"]
        svm = SvmModel(
            weights=_parse_list(doc["svm"]["weights"]),
            bias=float(doc["svm"]["bias"]),
            train_config=TrainConfig(
                regularization=float(tc["regularization"]),
                epochs=int(tc["epochs"]),
                schedule=tc["schedule"],
                shuffle_seed=int(tc["shuffle_seed"]),
            ),
        )
        return DetectorModel(
            key_fingerprint=int(doc["key_fingerprint"], 16),
            plan=plan,
            partition=partition,
            mode=doc["mode"],
            enhancement=enhancement,
            svm=svm,
            format_version=version,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model document: {exc}") from exc


def load_model(path: str) -> DetectorModel:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file {path!r} is not valid JSON") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"model file {path!r} does not hold a JSON object")
    return model_from_document(doc)


def persist_roundtrip(model: DetectorModel, path: str) -> DetectorModel:
    """Save then re-load; the result predicts identically to the input."""
    save_model(model, path)
    return load_model(path)
