"""Experiment protocols, the detector pipeline, metrics and reports.

Protocols: ``benchmark`` (per-attack 50/50 train/test), ``crossing_attack``
(train on one attack, test on every other), ``crossing_surrogate`` (attacks
generated against differently seeded surrogates for train and test),
``challenging`` (one detector trained on an N-attack mixture, tested per
attack), and ``harmless`` (benign noise and compression examples join the
training set with the clean label).

Every run is a pure function of its configuration: all randomness flows
from the seed pack, and worker counts change scheduling only, never
results.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
from scipy.ndimage import gaussian_filter

from .attacks import (
    PerturbationSpec,
    SurrogateModel,
    attack_fgsm,
    attack_pgd,
    per_example_spec,
    perturb_harmless,
    train_surrogate,
)
from .errors import ConfigError, DataError, DegenerateError, IoError, RangeError
from .features import extract_feature_vector, fit_enhancement, partition_bands
from .image_io import Dataset, Image, LabeledExample, load_idx_pair
from .keyed_selection import (
    DEFAULT_BLOCKING_PROB,
    DEFAULT_MIN_RETAINED_CONFIGS,
    DEFAULT_SPATIAL_VALUES,
    DetectorKey,
    SplitMix64,
    default_grid,
    sample_plan,
)
from .svm import DetectorModel, TrainConfig, predict, train_svm

METRICS_FOOTER = "metric convention: 0/0 ratios are reported as 0"

PROTOCOLS = ("benchmark", "crossing_attack", "crossing_surrogate",
             "challenging", "harmless")


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts; adversarial is the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise RangeError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def compute_metrics(counts: ConfusionCounts) -> dict:
    """Recall, precision, F1 and accuracy with the 0/0 -> 0 convention."""
    if counts.total == 0:
        raise DegenerateError("metrics need at least one evaluated example")

    def ratio(num: int, den: int) -> float:
        return num / den if den > 0 else 0.0

    recall = ratio(counts.tp, counts.tp + counts.fn)
    precision = ratio(counts.tp, counts.tp + counts.fp)
    f1 = ratio(2.0 * precision * recall, precision + recall) if (precision + recall) > 0 else 0.0
    accuracy = (counts.tp + counts.tn) / counts.total
    return {"recall": recall, "precision": precision, "f1": f1, "accuracy": accuracy}


@dataclass
class Seeds:
    """Seed pack; unset members derive from the root seed."""

    root: int = 0
    data: int | None = None
    split: int | None = None
    attack: int | None = None
    surrogate: int | None = None
    train: int | None = None
    key: int | None = None

    def __post_init__(self):
        offsets = {"data": 1, "split": 2, "attack": 3, "surrogate": 4,
                   "train": 5, "key": 6}
        for name, off in offsets.items():
            if getattr(self, name) is None:
                setattr(self, name, self.root + off)


@dataclass(frozen=True)
class DetectorOptions:
    """Hyperparameters of the full detector pipeline."""

    spatial_values: tuple = DEFAULT_SPATIAL_VALUES
    blocking_prob: float = DEFAULT_BLOCKING_PROB
    min_retained_configs: int = DEFAULT_MIN_RETAINED_CONFIGS
    max_order: int | None = None
    num_bands: int = 16
    mode: str = "magnitude"
    enhancement: bool = True
    weighting: bool = True
    keep_fraction: float = 0.75
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class DataConfig:
    """Dataset source: an IDX pair on disk or the synthetic generator."""

    kind: str = "synthetic"
    images_path: str | None = None
    labels_path: str | None = None
    count: int = 2000
    width: int = 28
    height: int = 28
    num_classes: int = 10

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("idx data needs images_path and labels_path")

    def load(self, seed: int) -> Dataset:
        if self.kind == "idx":
            return load_idx_pair(self.images_path, self.labels_path,
                                 num_classes=self.num_classes)
        return synthetic_victim_dataset(self.count, self.width, self.height,
                                        self.num_classes, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str
    data: DataConfig = field(default_factory=DataConfig)
    attacks: tuple = ()
    harmless: tuple = (("gaussian", 0.1), ("salt_pepper", 0.05), ("resample", 2))
    split_fraction: float = 0.5
    pool_size: int = 2000
    seeds: Seeds = field(default_factory=Seeds)
    detector: DetectorOptions = field(default_factory=DetectorOptions)
    surrogate_epochs: int = 300
    surrogate_lr: float = 0.5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(
                f"split_fraction must lie in (0, 1), got {self.split_fraction}"
            )
        if not self.attacks:
            raise ConfigError("attack list must be non-empty")
        for kind, _magnitude in self.harmless:
            if kind not in ("gaussian", "salt_pepper", "resample"):
                raise ConfigError(f"unknown harmless kind {kind!r}")


@dataclass(frozen=True)
class ReportRow:
    protocol: str
    train_attack: str
    test_attack: str
    recall: float
    precision: float
    f1: float
    accuracy: float
    n_test: int
    seed: int
    model_fingerprint: str


@dataclass(eq=False)
class Report:
    protocol: str
    rows: tuple
    config_echo: dict
    timestamp: str
    model_fingerprint: str
    footer: str = METRICS_FOOTER


def synthetic_victim_dataset(count: int, width: int = 28, height: int = 28,
                             num_classes: int = 10, seed: int = 0,
                             name: str = "synthetic") -> Dataset:
    """Deterministic stand-in for a small natural-image classification set.

    Each class is a smooth random field; examples add a weaker smooth
    wobble and are quantized to the 8-bit grid, giving low-frequency
    dominated content that a linear victim separates well.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    smooth = max(2.0, min(width, height) / 7.0)
    prototypes = []
    for _ in range(num_classes):
        fld = gaussian_filter(rng.standard_normal((height, width)), sigma=smooth)
        fld = fld - fld.min()
        peak = fld.max()
        if peak > 0:
            fld = fld / peak
        prototypes.append(0.15 + 0.7 * fld)
    examples = []
    for i in range(count):
        cls = i % num_classes
        wobble = gaussian_filter(rng.standard_normal((height, width)), sigma=smooth / 1.5)
        span = np.abs(wobble).max()
        if span > 0:
            wobble = wobble * (0.1 / span)
        img = np.clip(prototypes[cls] + wobble, 0.0, 1.0)
        img = np.rint(img * 255.0) / 255.0
        examples.append(LabeledExample(Image.from_matrix(img), cls))
    return Dataset(examples=examples, name=name, num_classes=num_classes)


def _parallel_map(fn, count: int, workers: int) -> list:
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def fit_detector(clean_images: list, adversarial_images: list, key: DetectorKey,
                 options: DetectorOptions = DetectorOptions(),
                 workers: int = 1) -> DetectorModel:
    """Train the full pipeline: plan, features, enhancement, SVM."""
    if not clean_images or not adversarial_images:
        raise DataError("both clean and adversarial training images are required")
    width, height = clean_images[0].width, clean_images[0].height
    grid = default_grid(width, height, max_order=options.max_order,
                        spatial_values=options.spatial_values,
                        blocking_prob=options.blocking_prob,
                        min_retained_configs=options.min_retained_configs)
    plan = sample_plan(key, grid)
    partition = partition_bands(width, height, options.num_bands)
    images = list(clean_images) + list(adversarial_images)
    labels = [0] * len(clean_images) + [1] * len(adversarial_images)
    raw = _parallel_map(
        lambda i: extract_feature_vector(images[i], plan, partition, None, options.mode),
        len(images), workers,
    )
    state = None
    if options.enhancement:
        state = fit_enhancement(raw, labels, keep_fraction=options.keep_fraction,
                                weighting=options.weighting)
        final = [state.apply(fv.values) for fv in raw]
    else:
        final = [fv.values for fv in raw]
    svm_model = train_svm(final, labels, options.train)
    return DetectorModel(
        key_fingerprint=plan.key_fingerprint,
        plan=plan,
        partition=partition,
        mode=options.mode,
        enhancement=state,
        svm=svm_model,
    )


def apply_detector(model: DetectorModel, image: Image) -> tuple[int, float]:
    """Predict one image: (label, margin)."""
    fv = extract_feature_vector(image, model.plan, model.partition,
                                model.enhancement, model.mode)
    return predict(model.svm, fv)


def _evaluate(model: DetectorModel, images: list, labels: list,
              workers: int = 1) -> ConfusionCounts:
    predictions = _parallel_map(
        lambda i: apply_detector(model, images[i])[0], len(images), workers
    )
    tp = fp = tn = fn = 0
    for pred, truth in zip(predictions, labels):
        if truth == 1:
            tp, fn = (tp + 1, fn) if pred == 1 else (tp, fn + 1)
        else:
            tn, fp = (tn + 1, fp) if pred == 0 else (tn, fp + 1)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def split_indices(count: int, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded disjoint train/test index split (sorted within each side)."""
    order = list(range(count))
    SplitMix64(seed).shuffle(order)
    n_train = int(round(count * fraction))
    if n_train < 1 or n_train >= count:
        raise DataError(f"cannot split {count} examples at fraction {fraction}")
    return sorted(order[:n_train]), sorted(order[n_train:])


def _attack_names(attacks) -> list:
    names = []
    seen = {}
    for spec in attacks:
        seen[spec.attack_kind] = seen.get(spec.attack_kind, 0) + 1
        suffix = "" if seen[spec.attack_kind] == 1 else f"-{seen[spec.attack_kind]}"
        names.append(spec.attack_kind + suffix)
    return names


def _attack_pool(model: SurrogateModel, examples: list, indices: list,
                 spec: PerturbationSpec, workers: int) -> dict:
    """Adversarial images for the given pool indices, seeded per index."""
    def one(k: int) -> Image:
        i = indices[k]
        ex = examples[i]
        s = per_example_spec(spec, i)
        if spec.attack_kind == "fgsm":
            delta = attack_fgsm(model, ex.image, ex.label, s)
        else:
            delta = attack_pgd(model, ex.image, ex.label, s)
        return Image(width=ex.image.width, height=ex.image.height,
                     pixels=np.clip(ex.image.pixels + delta.pixels, 0.0, 1.0))

    results = _parallel_map(one, len(indices), workers)
    return dict(zip(indices, results))


def _harmless_pool(examples: list, indices: list, kind: str, magnitude,
                   kind_index: int, base_seed: int, workers: int) -> dict:
    def one(k: int) -> Image:
        i = indices[k]
        seed = base_seed ^ (kind_index << 32) ^ i
        return perturb_harmless(examples[i].image, kind, magnitude, seed=seed)

    results = _parallel_map(one, len(indices), workers)
    return dict(zip(indices, results))


def config_echo(config: ExperimentConfig) -> dict:
    """JSON-ready mirror of the effective configuration."""
    return {
        "protocol": config.protocol,
        "data": {
            "kind": config.data.kind,
            "images_path": config.data.images_path,
            "labels_path": config.data.labels_path,
            "count": config.data.count,
            "width": config.data.width,
            "height": config.data.height,
            "num_classes": config.data.num_classes,
        },
        "attacks": [
            {"kind": s.attack_kind, "epsilon": s.epsilon, "steps": s.steps,
             "alpha": s.alpha, "rand_init": s.rand_init, "seed": s.seed}
            for s in config.attacks
        ],
        "harmless": [[kind, magnitude] for kind, magnitude in config.harmless],
        "split_fraction": config.split_fraction,
        "pool_size": config.pool_size,
        "seeds": {
            "root": config.seeds.root, "data": config.seeds.data,
            "split": config.seeds.split, "attack": config.seeds.attack,
            "surrogate": config.seeds.surrogate, "train": config.seeds.train,
            "key": config.seeds.key,
        },
        "detector": {
            "spatial_values": list(config.detector.spatial_values),
            "blocking_prob": config.detector.blocking_prob,
            "min_retained_configs": config.detector.min_retained_configs,
            "max_order": config.detector.max_order,
            "num_bands": config.detector.num_bands,
            "mode": config.detector.mode,
            "enhancement": config.detector.enhancement,
            "weighting": config.detector.weighting,
            "keep_fraction": config.detector.keep_fraction,
            "svm": {
                "regularization": config.detector.train.regularization,
                "epochs": config.detector.train.epochs,
                "schedule": config.detector.train.schedule,
                "shuffle_seed": config.detector.train.shuffle_seed,
            },
        },
        "surrogate": {"epochs": config.surrogate_epochs, "lr": config.surrogate_lr},
    }


def _default_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_experiment(config: ExperimentConfig, clock=None, workers: int = 1) -> Report:
    """Run one protocol and return its report (see module docstring)."""
    report, _ = run_experiment_with_artifacts(config, clock=clock, workers=workers)
    return report


def run_experiment_with_artifacts(config: ExperimentConfig, clock=None,
                                  workers: int = 1) -> tuple[Report, dict]:
    """Like :func:`run_experiment`, also returning models and raw counts."""
    dataset = config.data.load(seed=config.seeds.data)
    if len(dataset) < config.pool_size:
        raise DataError(
            f"dataset holds {len(dataset)} examples, pool needs {config.pool_size}"
        )
    examples = dataset.examples[: config.pool_size]
    train_idx, test_idx = split_indices(config.pool_size, config.split_fraction,
                                        config.seeds.split)
    surrogate = train_surrogate(dataset, epochs=config.surrogate_epochs,
                                lr=config.surrogate_lr, seed=config.seeds.surrogate)
    key = DetectorKey(config.seeds.key & ((1 << 64) - 1))
    names = _attack_names(config.attacks)
    timestamp = clock() if clock is not None else _default_timestamp()

    rows = []
    artifacts = {"models": {}, "confusion": {}, "surrogate": surrogate,
                 "train_idx": train_idx, "test_idx": test_idx,
                 "examples": examples}

    def clean_images(indices):
        return [examples[i].image for i in indices]

    def make_row(protocol, train_name, test_name, counts, fingerprint):
        metrics = compute_metrics(counts)
        row = ReportRow(protocol=protocol, train_attack=train_name,
                        test_attack=test_name, n_test=counts.total,
                        seed=config.seeds.root, model_fingerprint=fingerprint,
                        **metrics)
        rows.append(row)
        artifacts["confusion"][(train_name, test_name)] = counts

    if config.protocol in ("benchmark", "crossing_attack"):
        pools = {}
        models = {}
        for name, spec in zip(names, config.attacks):
            train_adv = _attack_pool(surrogate, examples, train_idx, spec, workers)
            test_adv = _attack_pool(surrogate, examples, test_idx, spec, workers)
            pools[name] = (train_adv, test_adv)
            model = fit_detector(clean_images(train_idx),
                                 [train_adv[i] for i in train_idx],
                                 key, config.detector, workers)
            models[name] = model
            artifacts["models"][name] = model
        pairs = ([(n, n) for n in names] if config.protocol == "benchmark"
                 else [(a, b) for a in names for b in names])
        for train_name, test_name in pairs:
            model = models[train_name]
            _, test_adv = pools[test_name]
            images = clean_images(test_idx) + [test_adv[i] for i in test_idx]
            labels = [0] * len(test_idx) + [1] * len(test_idx)
            counts = _evaluate(model, images, labels, workers)
            make_row(config.protocol, train_name, test_name, counts,
                     f"{model.key_fingerprint:016x}")

    elif config.protocol == "crossing_surrogate":
        surrogate_b = train_surrogate(dataset, epochs=config.surrogate_epochs,
                                      lr=config.surrogate_lr,
                                      seed=config.seeds.surrogate + 1)
        artifacts["surrogate_b"] = surrogate_b
        for name, spec in zip(names, config.attacks):
            train_adv = _attack_pool(surrogate, examples, train_idx, spec, workers)
            test_adv = _attack_pool(surrogate_b, examples, test_idx, spec, workers)
            model = fit_detector(clean_images(train_idx),
                                 [train_adv[i] for i in train_idx],
                                 key, config.detector, workers)
            artifacts["models"][name] = model
            images = clean_images(test_idx) + [test_adv[i] for i in test_idx]
            labels = [0] * len(test_idx) + [1] * len(test_idx)
            counts = _evaluate(model, images, labels, workers)
            make_row("crossing_surrogate", name, name, counts,
                     f"{model.key_fingerprint:016x}")

    elif config.protocol == "challenging":
        n_attacks = len(config.attacks)
        chunk = len(train_idx) // n_attacks
        if chunk < 1:
            raise DataError(
                f"{len(train_idx)} training images cannot cover {n_attacks} attacks"
            )
        train_adv = []
        for a, spec in enumerate(config.attacks):
            lo = a * chunk
            hi = (a + 1) * chunk if a < n_attacks - 1 else len(train_idx)
            part = train_idx[lo:hi]
            pool = _attack_pool(surrogate, examples, part, spec, workers)
            train_adv.extend(pool[i] for i in part)
        model = fit_detector(clean_images(train_idx), train_adv, key,
                             config.detector, workers)
        train_name = names[0] if n_attacks == 1 else f"mixture{n_attacks}"
        row_protocol = "benchmark" if n_attacks == 1 else "challenging"
        artifacts["models"][train_name] = model
        for name, spec in zip(names, config.attacks):
            test_adv = _attack_pool(surrogate, examples, test_idx, spec, workers)
            images = clean_images(test_idx) + [test_adv[i] for i in test_idx]
            labels = [0] * len(test_idx) + [1] * len(test_idx)
            counts = _evaluate(model, images, labels, workers)
            make_row(row_protocol, train_name, name, counts,
                     f"{model.key_fingerprint:016x}")

    elif config.protocol == "harmless":
        kinds = [kind for kind, _ in config.harmless]
        train_clean = clean_images(train_idx)
        # One benign variant per kind per training image; benign examples
        # share the clean label.
        train_harmless = []
        for kind_index, (kind, magnitude) in enumerate(config.harmless):
            pool = _harmless_pool(examples, train_idx, kind, magnitude,
                                  kind_index, config.seeds.attack, workers)
            train_harmless.extend(pool[i] for i in train_idx)
        train_adv = []
        for spec in config.attacks:
            pool = _attack_pool(surrogate, examples, train_idx, spec, workers)
            train_adv.extend(pool[i] for i in train_idx)
        model = fit_detector(train_clean + train_harmless, train_adv, key,
                             config.detector, workers)
        train_name = "+".join(names)
        artifacts["models"][train_name] = model
        test_adv = []
        for spec in config.attacks:
            pool = _attack_pool(surrogate, examples, test_idx, spec, workers)
            test_adv.extend(pool[i] for i in test_idx)
        conditions = [("clean", None)] + [(k, m) for k, m in config.harmless]
        for cond_index, (kind, magnitude) in enumerate(conditions):
            if kind == "clean":
                negatives = clean_images(test_idx)
            else:
                kind_index = kinds.index(kind)
                pool = _harmless_pool(examples, test_idx, kind, magnitude,
                                      kind_index, config.seeds.attack, workers)
                negatives = [pool[i] for i in test_idx]
            images = negatives + test_adv
            labels = [0] * len(negatives) + [1] * len(test_adv)
            counts = _evaluate(model, images, labels, workers)
            make_row("harmless", train_name, kind, counts,
                     f"{model.key_fingerprint:016x}")

    fingerprint = rows[0].model_fingerprint if rows else ""
    report = Report(protocol=config.protocol, rows=tuple(rows),
                    config_echo=config_echo(config), timestamp=timestamp,
                    model_fingerprint=fingerprint)
    return report, artifacts


CSV_COLUMNS = ("protocol", "train_attack", "test_attack", "recall", "precision",
               "f1", "accuracy", "n_test", "seed", "model_fingerprint")


def emit_report(report: Report, path: str, format: str = "csv") -> None:
    """Write a report as CSV (rows only) or JSON (full mirror)."""
    if format not in ("csv", "json"):
        raise ConfigError(f"unknown report format {format!r}")
    try:
        if format == "csv":
            lines = [",".join(CSV_COLUMNS)]
            for row in report.rows:
                lines.append(",".join([
                    row.protocol, row.train_attack, row.test_attack,
                    f"{row.recall:.4f}", f"{row.precision:.4f}",
                    f"{row.f1:.4f}", f"{row.accuracy:.4f}",
                    str(row.n_test), str(row.seed), row.model_fingerprint,
                ]))
            with open(path, "w", encoding="ascii") as fh:
                fh.write("\n".join(lines) + "\n")
        else:
            doc = {
                "protocol": report.protocol,
                "timestamp": report.timestamp,
                "model_fingerprint": report.model_fingerprint,
                "footer": report.footer,
                "config": report.config_echo,
                "rows": [
                    {
                        "protocol": row.protocol,
                        "train_attack": row.train_attack,
                        "test_attack": row.test_attack,
                        "recall": round(row.recall, 4),
                        "precision": round(row.precision, 4),
                        "f1": round(row.f1, 4),
                        "accuracy": round(row.accuracy, 4),
                        "n_test": row.n_test,
                        "seed": row.seed,
                        "model_fingerprint": row.model_fingerprint,
                    }
                    for row in report.rows
                ],
            }
            with open(path, "w", encoding="ascii") as fh:
                json.dump(doc, fh, indent=1)
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write report to {path!r}: {exc}") from exc


def read_report_json(path: str) -> Report:
    """Load a JSON report back into a Report object."""
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    rows = tuple(
        ReportRow(protocol=r["protocol"], train_attack=r["train_attack"],
                  test_attack=r["test_attack"], recall=r["recall"],
                  precision=r["precision"], f1=r["f1"], accuracy=r["accuracy"],
                  n_test=r["n_test"], seed=r["seed"],
                  model_fingerprint=r["model_fingerprint"])
        for r in doc["rows"]
    )
    return Report(protocol=doc["protocol"], rows=rows, config_echo=doc["config"],
                  timestamp=doc["timestamp"],
                  model_fingerprint=doc["model_fingerprint"],
                  footer=doc["footer"])
