"""Desk-scale perturbation generation against a differentiable surrogate.

The victim stand-in is a multinomial logistic regression on raw pixels;
the detector never inspects the victim, so the surrogate only shapes the
perturbations.  Implemented attacks: single-step gradient-sign (fgsm),
its iterated form without (bim) and with (pgd) random start, a
defense-aware variant that additionally penalizes perturbation energy on
a chosen coefficient subset, and harmless perturbations (noise and a
resampling stand-in for compression).

Every adversarial output satisfies the budget by construction:
``max |delta| <= epsilon`` and ``x + delta`` stays inside the pixel box.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DegenerateError, RangeError
from .image_io import Dataset, Image, save_idx_pair
from .keyed_selection import SelectionPlan
from .krawtchouk import SpatialConfig, _cached_table

ATTACK_KINDS = ("fgsm", "bim", "pgd")
HARMLESS_KINDS = ("gaussian", "salt_pepper", "resample")


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """Multinomial logistic victim stand-in on flattened pixels."""

    weights: np.ndarray  # (num_classes, dim)
    biases: np.ndarray  # (num_classes,)
    num_classes: int
    train_accuracy: float = float("nan")

    def logits(self, pixels: np.ndarray) -> np.ndarray:
        return pixels @ self.weights.T + self.biases

    def predict(self, pixels: np.ndarray) -> int:
        return int(np.argmax(self.logits(pixels)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def train_surrogate(dataset: Dataset, epochs: int = 300, lr: float = 0.5,
                    seed: int = 0) -> SurrogateModel:
    """Full-batch gradient descent on cross-entropy, deterministic per seed.

    The seed drives a small Gaussian initialization, so different seeds
    give genuinely different (but comparably accurate) surrogates; with
    zero epochs the near-zero weights leave the logits near-uniform.
    """
    labels = dataset.labels()
    present = np.unique(labels)
    if len(present) < 2:
        raise DegenerateError("surrogate training needs at least two classes")
    num_classes = dataset.num_classes
    matrix = np.vstack([ex.image.pixels for ex in dataset.examples])
    count, dim = matrix.shape
    onehot = np.zeros((count, num_classes))
    onehot[np.arange(count), labels] = 1.0

    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 0.01, size=(num_classes, dim))
    biases = np.zeros(num_classes)
    for _ in range(epochs):
        probs = _softmax(matrix @ weights.T + biases)
        err = probs - onehot
        weights -= lr * (err.T @ matrix) / count
        biases -= lr * err.mean(axis=0)
    predictions = np.argmax(matrix @ weights.T + biases, axis=1)
    accuracy = float((predictions == labels).mean())
    return SurrogateModel(weights=weights, biases=biases,
                          num_classes=num_classes, train_accuracy=accuracy)


def cross_entropy(model: SurrogateModel, pixels: np.ndarray, label: int) -> float:
    probs = _softmax(model.logits(pixels))
    return float(-np.log(max(probs[label], 1e-300)))


def input_gradient(model: SurrogateModel, pixels: np.ndarray, label: int) -> np.ndarray:
    """Analytic gradient of the cross-entropy loss w.r.t. the pixels."""
    if not 0 <= label < model.num_classes:
        raise RangeError(f"label {label} outside 0..{model.num_classes - 1}")
    probs = _softmax(model.logits(pixels))
    probs[label] -= 1.0
    return model.weights.T @ probs


@dataclass(frozen=True)
class PerturbationSpec:
    """Attack parameters; construction enforces the budget invariants."""

    attack_kind: str
    epsilon: float
    steps: int = 1
    alpha: float | None = None
    rand_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.attack_kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.attack_kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise RangeError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.attack_kind == "fgsm" and self.steps != 1:
            raise ConfigError("fgsm is single-step by definition")
        if self.alpha is None:
            object.__setattr__(
                self, "alpha",
                min(self.epsilon, 2.5 * self.epsilon / self.steps),
            )
        if self.alpha > self.epsilon:
            raise ConfigError(f"alpha {self.alpha} exceeds epsilon {self.epsilon}")


def fgsm_spec(epsilon: float, seed: int = 0) -> PerturbationSpec:
    return PerturbationSpec("fgsm", epsilon, steps=1, alpha=epsilon, seed=seed)


def bim_spec(epsilon: float, steps: int = 10, alpha: float | None = None,
             seed: int = 0) -> PerturbationSpec:
    return PerturbationSpec("bim", epsilon, steps=steps, alpha=alpha,
                            rand_init=False, seed=seed)


def pgd_spec(epsilon: float, steps: int = 10, alpha: float | None = None,
             seed: int = 0) -> PerturbationSpec:
    return PerturbationSpec("pgd", epsilon, steps=steps, alpha=alpha,
                            rand_init=True, seed=seed)


def _pgd_loop(model: SurrogateModel, image: Image, label: int,
              spec: PerturbationSpec, penalty=None, penalty_weight: float = 0.0) -> np.ndarray:
    x = image.pixels
    eps = spec.epsilon
    if spec.rand_init and eps > 0.0:
        rng = np.random.default_rng(spec.seed)
        delta = rng.uniform(-eps, eps, size=x.shape)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    else:
        delta = np.zeros_like(x)
    for _ in range(spec.steps):
        grad = input_gradient(model, x + delta, label)
        if penalty is not None and penalty_weight > 0.0:
            grad = grad - penalty_weight * penalty.gradient(delta)
        delta = delta + spec.alpha * np.sign(grad)
        delta = np.clip(delta, -eps, eps)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return delta


def attack_fgsm(model: SurrogateModel, image: Image, true_label: int,
                spec: PerturbationSpec) -> Image:
    """Single gradient-sign step, clipped to the pixel box.

    Returns the perturbation raster; the adversarial example is
    ``image + delta`` and lies in the image space by construction.
    """
    if spec.attack_kind != "fgsm":
        raise ConfigError(f"attack_fgsm got a {spec.attack_kind!r} spec")
    grad = input_gradient(model, image.pixels, true_label)
    perturbed = np.clip(image.pixels + spec.epsilon * np.sign(grad), 0.0, 1.0)
    return Image(width=image.width, height=image.height,
                 pixels=perturbed - image.pixels)


def attack_pgd(model: SurrogateModel, image: Image, true_label: int,
               spec: PerturbationSpec) -> Image:
    """Iterated gradient-sign attack (bim without, pgd with random start)."""
    if spec.attack_kind not in ("bim", "pgd"):
        raise ConfigError(f"attack_pgd got a {spec.attack_kind!r} spec")
    if not 0 <= true_label < model.num_classes:
        raise RangeError(f"label {true_label} outside 0..{model.num_classes - 1}")
    delta = _pgd_loop(model, image, true_label, spec)
    return Image(width=image.width, height=image.height, pixels=delta)


@dataclass(frozen=True)
class FeatureSubset:
    """Coefficient identifiers ``(n, m, config)`` the attacker targets."""

    keys: tuple

    def __post_init__(self):
        if not self.keys:
            raise ConfigError("feature subset must be non-empty")


def detector_subset(plan: SelectionPlan, width: int, height: int,
                    min_norm_fraction: float = 0.5) -> FeatureSubset:
    """Plan coefficients in the upper part of the frequency range.

    Keeps plan keys whose order norm is at least ``min_norm_fraction`` of
    the partition radius: the region where gradient-sign perturbations
    concentrate their energy and band features react most.
    """
    radius = np.hypot(width, height)
    cutoff = min_norm_fraction * radius
    keys = []
    for config in plan.retained_configs:
        for n, m in plan.order_mask:
            if np.hypot(n, m) >= cutoff:
                keys.append((n, m, config))
    return FeatureSubset(keys=tuple(keys))


class SubsetPenalty:
    """Precomputed quadratic penalty ``||F_subset(delta)||^2``.

    Rows of the internal matrix are the flattened separable basis images
    of the subset keys, so the coefficient vector of a perturbation is one
    matrix-vector product and the energy gradient is ``2 G delta`` with
    the Gram matrix cached up front.
    """

    def __init__(self, subset: FeatureSubset, width: int, height: int):
        self.subset = subset
        self.width = width
        self.height = height
        rows = []
        by_config: dict[SpatialConfig, list] = {}
        for n, m, config in subset.keys:
            by_config.setdefault(config, []).append((n, m))
        for config, orders in by_config.items():
            max_n = max(n for n, _ in orders)
            max_m = max(m for _, m in orders)
            tx = _cached_table(config.px, width - 1, max_n)
            ty = _cached_table(config.py, height - 1, max_m)
            for n, m in orders:
                rows.append(np.outer(ty.values[m], tx.values[n]).ravel())
        self.matrix = np.vstack(rows)
        self.gram = self.matrix.T @ self.matrix

    def coefficients(self, delta: np.ndarray) -> np.ndarray:
        return self.matrix @ delta

    def energy(self, delta: np.ndarray) -> float:
        return float(np.linalg.norm(self.matrix @ delta))

    def gradient(self, delta: np.ndarray) -> np.ndarray:
        return 2.0 * (self.gram @ delta)


@dataclass(frozen=True)
class DefenseAwareSpec:
    """Defense-aware attack parameters.

    ``penalty_weight`` scales the optimizer's energy penalty;
    ``energy_threshold`` and ``correlation_threshold`` are the reporting
    thresholds the outcome is compared against.
    """

    base: PerturbationSpec
    subset: FeatureSubset
    penalty_weight: float = 0.0
    energy_threshold: float = 0.0
    correlation_threshold: float = 0.0

    def __post_init__(self):
        if self.penalty_weight < 0.0:
            raise ConfigError(f"penalty_weight must be >= 0, got {self.penalty_weight}")
        if not -1.0 <= self.correlation_threshold <= 1.0:
            raise ConfigError("correlation_threshold must lie in [-1, 1]")


@dataclass(frozen=True, eq=False)
class DefenseAwareOutcome:
    """Perturbation plus the reported subset-energy check."""

    delta: Image
    subset_energy: float
    within_energy_threshold: bool


def attack_defense_aware(model: SurrogateModel, image: Image, true_label: int,
                         spec: DefenseAwareSpec,
                         context: SubsetPenalty) -> DefenseAwareOutcome:
    """PGD on the composite objective loss - weight * subset energy.

    The penalty gradient is analytic (the decomposition is linear in the
    image), so each step costs one extra Gram product.  With zero penalty
    weight the trajectory is bit-identical to the plain iterated attack.
    """
    if context.subset is not spec.subset and context.subset.keys != spec.subset.keys:
        raise ConfigError("context was built for a different feature subset")
    if context.width != image.width or context.height != image.height:
        raise ConfigError("context image size does not match the input")
    if not 0 <= true_label < model.num_classes:
        raise RangeError(f"label {true_label} outside 0..{model.num_classes - 1}")
    delta = _pgd_loop(model, image, true_label, spec.base,
                      penalty=context, penalty_weight=spec.penalty_weight)
    energy = context.energy(delta)
    return DefenseAwareOutcome(
        delta=Image(width=image.width, height=image.height, pixels=delta),
        subset_energy=energy,
        within_energy_threshold=bool(energy < spec.energy_threshold),
    )


def feature_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two coefficient vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or a.shape != b.shape:
        raise ConfigError("correlation needs two equal non-empty vectors")
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        raise DegenerateError("correlation undefined for a zero-variance input")
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def perturb_harmless(image: Image, kind: str, magnitude, seed: int = 0) -> Image:
    """Benign perturbation: seeded noise or a resampling compression stand-in.

    gaussian: add N(0, magnitude^2) and clip; salt_pepper: force each pixel
    to 0 or 1 with probability magnitude/2 each; resample: box-mean
    downsample by the integer factor ``magnitude`` then nearest-neighbor
    upsample back.
    """
    if kind not in HARMLESS_KINDS:
        raise ConfigError(f"unknown harmless kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        sigma = float(magnitude)
        if sigma < 0.0:
            raise RangeError(f"gaussian sigma must be >= 0, got {sigma}")
        noisy = np.clip(image.pixels + rng.normal(0.0, sigma, size=image.pixels.shape), 0.0, 1.0)
        return Image(width=image.width, height=image.height, pixels=noisy)
    if kind == "salt_pepper":
        prob = float(magnitude)
        if not 0.0 <= prob <= 1.0:
            raise RangeError(f"salt-and-pepper probability must lie in [0, 1], got {prob}")
        u = rng.random(size=image.pixels.shape)
        out = np.where(u < prob / 2.0, 0.0, np.where(u < prob, 1.0, image.pixels))
        return Image(width=image.width, height=image.height, pixels=out)
    factor = int(magnitude)
    if factor != magnitude or factor < 1:
        raise RangeError(f"resample factor must be an integer >= 1, got {magnitude}")
    matrix = image.as_matrix()
    height, width = matrix.shape
    row_starts = np.arange(0, height, factor)
    col_starts = np.arange(0, width, factor)
    sums = np.add.reduceat(np.add.reduceat(matrix, row_starts, axis=0), col_starts, axis=1)
    row_sizes = np.diff(np.append(row_starts, height))
    col_sizes = np.diff(np.append(col_starts, width))
    means = sums / np.outer(row_sizes, col_sizes)
    up = np.repeat(np.repeat(means, factor, axis=0), factor, axis=1)[:height, :width]
    return Image.from_matrix(up)


def quantize_delta(image: Image, delta: Image) -> Image:
    """Snap ``image + delta`` to the 8-bit grid and return the new delta."""
    perturbed = np.rint(np.clip(image.pixels + delta.pixels, 0.0, 1.0) * 255.0) / 255.0
    return Image(width=image.width, height=image.height,
                 pixels=perturbed - image.pixels)


def per_example_spec(spec: PerturbationSpec, index: int) -> PerturbationSpec:
    """Spec for one batch element: the seed is xored with the index."""
    return replace(spec, seed=spec.seed ^ index)


def attack_dataset(model: SurrogateModel, dataset: Dataset,
                   spec: PerturbationSpec, workers: int = 1) -> list:
    """Perturbation rasters for every example; order-stable and seeded."""
    def one(index: int) -> Image:
        ex = dataset.examples[index]
        s = per_example_spec(spec, index)
        if spec.attack_kind == "fgsm":
            return attack_fgsm(model, ex.image, ex.label, s)
        return attack_pgd(model, ex.image, ex.label, s)

    if workers <= 1:
        return [one(i) for i in range(len(dataset))]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(dataset))))


def fooling_rate(model: SurrogateModel, dataset: Dataset, deltas: list) -> float:
    """Fraction of perturbed examples whose surrogate prediction flips."""
    flipped = 0
    for ex, delta in zip(dataset.examples, deltas):
        before = model.predict(ex.image.pixels)
        after = model.predict(ex.image.pixels + delta.pixels)
        if after != before:
            flipped += 1
    return flipped / len(dataset.examples)


def surrogate_fingerprint(model: SurrogateModel) -> str:
    """Stable 16-hex-digit digest of the surrogate parameters."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(model.weights).tobytes())
    digest.update(np.ascontiguousarray(model.biases).tobytes())
    return digest.hexdigest()[:16]


def write_attacked_dataset(dataset: Dataset, deltas: list, images_path: str,
                           labels_path: str, manifest_path: str,
                           spec: PerturbationSpec, model: SurrogateModel) -> None:
    """Write perturbed images as an IDX pair plus a JSON manifest.

    The IDX container quantizes pixels to the 8-bit grid, which models the
    re-encoding a deployed system would apply.
    """
    from .image_io import LabeledExample

    perturbed = Dataset(
        examples=[
            LabeledExample(
                Image(width=dataset.width, height=dataset.height,
                      pixels=np.clip(ex.image.pixels + d.pixels, 0.0, 1.0)),
                ex.label,
            )
            for ex, d in zip(dataset.examples, deltas)
        ],
        name=dataset.name + f"+{spec.attack_kind}",
        num_classes=dataset.num_classes,
    )
    save_idx_pair(perturbed, images_path, labels_path)
    manifest = {
        "attack_kind": spec.attack_kind,
        "epsilon": spec.epsilon,
        "steps": spec.steps,
        "alpha": spec.alpha,
        "rand_init": spec.rand_init,
        "seed": spec.seed,
        "surrogate_fingerprint": surrogate_fingerprint(model),
        "source": dataset.name,
        "count": len(dataset),
    }
    with open(manifest_path, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
