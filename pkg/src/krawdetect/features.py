"""Band integration and enhancement of decomposition coefficients.

Frequency orders are partitioned into equally spaced radial shells under
the l2 norm; the coefficients falling in one shell are summed (signed or
by magnitude) into a single feature component per spatial configuration.
Optional enhancement weights components by their between-class contrast,
drops weakly label-correlated ones, and standardizes with training stats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, ShapeError
from .image_io import Image
from .keyed_selection import SelectionPlan
from .krawtchouk import CoefficientSet, decompose

_VARIANCE_FLOOR = 1e-12

INTEGRATION_MODES = ("raw", "magnitude")


@dataclass(frozen=True)
class BandPartition:
    """Equal radial partition of the (n, m) order plane.

    Band ``i`` (1-based) covers l2 norms in ``[(i-1) R / num_bands,
    i R / num_bands)`` with ``R = ||(width, height)||_2``; the last band
    additionally includes its upper boundary so the partition is total.
    """

    num_bands: int
    width: int
    height: int

    def __post_init__(self):
        if self.num_bands < 1:
            raise ConfigError(f"num_bands must be >= 1, got {self.num_bands}")

    @property
    def radius(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def thresholds(self) -> np.ndarray:
        return np.linspace(0.0, self.radius, self.num_bands + 1)

    def band_index(self, n: int, m: int) -> int:
        """1-based band of one order; the top band is closed above."""
        return int(self.band_indices(np.array([n]), np.array([m]))[0])

    def band_indices(self, n: np.ndarray, m: np.ndarray) -> np.ndarray:
        norms = np.hypot(np.asarray(n, dtype=float), np.asarray(m, dtype=float))
        if norms.size and norms.max() > self.radius:
            raise ConfigError("order norm exceeds the partition radius")
        idx = np.floor(norms * self.num_bands / self.radius).astype(int) + 1
        return np.minimum(idx, self.num_bands)


def partition_bands(width: int, height: int, num_bands: int) -> BandPartition:
    """Construct the radial band partition for one image size."""
    return BandPartition(num_bands=num_bands, width=width, height=height)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Feature values plus the (config, band) descriptor of each entry."""

    values: np.ndarray
    layout: tuple
    standardized: bool = False

    def __post_init__(self):
        if len(self.values) != len(self.layout):
            raise ShapeError(
                f"{len(self.values)} values vs {len(self.layout)} layout entries"
            )


def integrate_bands(coeffs: CoefficientSet, partition: BandPartition,
                    mode: str = "magnitude") -> FeatureVector:
    """Sum coefficients into one component per (config, band).

    ``raw`` sums the signed coefficients and therefore preserves linearity
    of the decomposition; ``magnitude`` (the default) sums absolute values,
    which keeps sign-alternating perturbation energy from cancelling.
    Empty bands contribute 0.
    """
    if mode not in INTEGRATION_MODES:
        raise ConfigError(f"unknown integration mode {mode!r}")
    n = np.fromiter((o[0] for o in coeffs.orders), dtype=int, count=len(coeffs.orders))
    m = np.fromiter((o[1] for o in coeffs.orders), dtype=int, count=len(coeffs.orders))
    bands = partition.band_indices(n, m) - 1
    blocks = []
    layout = []
    for ci, config in enumerate(coeffs.configs):
        row = coeffs.values[ci]
        if mode == "magnitude":
            row = np.abs(row)
        blocks.append(np.bincount(bands, weights=row, minlength=partition.num_bands))
        layout.extend((config, band + 1) for band in range(partition.num_bands))
    return FeatureVector(values=np.concatenate(blocks), layout=tuple(layout))


@dataclass(frozen=True, eq=False)
class EnhancementState:
    """Per-entry weighting, ranking mask, and standardization stats."""

    weights: np.ndarray | None
    keep_mask: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        if len(values) != len(self.keep_mask):
            raise ShapeError(
                f"feature dimension {len(values)} does not match state "
                f"dimension {len(self.keep_mask)}"
            )
        out = values * self.weights if self.weights is not None else np.array(values, dtype=float)
        safe_std = np.where(self.std > 0.0, self.std, 1.0)
        out = (out - self.mean) / safe_std
        return out[self.keep_mask]


def _point_biserial(column: np.ndarray, labels: np.ndarray) -> float:
    cs = column.std()
    ls = labels.std()
    if cs == 0.0 or ls == 0.0:
        return 0.0
    return float(((column - column.mean()) * (labels - labels.mean())).mean() / (cs * ls))


def fit_enhancement(train_features: list, labels, keep_fraction: float = 0.75,
                    weighting: bool = True) -> EnhancementState:
    """Fit weights, ranking mask and standardization stats on training data.

    Weights are the per-entry contrast ratio |mean_adv - mean_clean| /
    (pooled std + floor), normalized to mean 1.  Ranking keeps the
    ``ceil(keep_fraction * dim)`` entries with the largest absolute
    point-biserial correlation against the labels; constant entries are
    masked out regardless.  Standardization stats are computed on the
    (weighted) training features.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    matrix = np.vstack([fv.values if isinstance(fv, FeatureVector) else fv
                        for fv in train_features])
    y = np.asarray(labels, dtype=int)
    if len(y) != matrix.shape[0]:
        raise ShapeError(f"{matrix.shape[0]} feature rows vs {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise DegenerateError("enhancement needs both classes present")

    clean = matrix[y == 0]
    adv = matrix[y == 1]
    n0, n1 = len(clean), len(adv)
    pooled_var = (n0 * clean.var(axis=0) + n1 * adv.var(axis=0)) / (n0 + n1)
    pooled_std = np.sqrt(pooled_var)
    contrast = np.abs(adv.mean(axis=0) - clean.mean(axis=0)) / (pooled_std + _VARIANCE_FLOOR)

    # Peak-to-peak is an exact constant-column test; std(axis=0) can land
    # at ~1e-16 instead of 0 depending on the summation order.
    degenerate = (matrix.max(axis=0) - matrix.min(axis=0)) == 0.0

    weights = None
    if weighting:
        weights = np.where(degenerate, 0.0, contrast)
        scale = weights.mean()
        if scale > 0.0:
            weights = weights / scale

    weighted = matrix * weights if weights is not None else matrix
    mean = weighted.mean(axis=0)
    std = weighted.std(axis=0)

    dim = matrix.shape[1]
    keep_count = int(math.ceil(keep_fraction * dim))
    scores = np.array([_point_biserial(matrix[:, j], y.astype(float)) for j in range(dim)])
    ranked = np.argsort(-np.abs(scores), kind="stable")
    keep_mask = np.zeros(dim, dtype=bool)
    keep_mask[ranked[:keep_count]] = True
    keep_mask &= ~degenerate
    if not keep_mask.any():
        raise DegenerateError("ranking left no usable feature entries")

    return EnhancementState(weights=weights, keep_mask=keep_mask, mean=mean, std=std)


def extract_feature_vector(image: Image, plan: SelectionPlan,
                           partition: BandPartition,
                           state: EnhancementState | None = None,
                           mode: str = "magnitude") -> FeatureVector:
    """Full featuring pipeline for one image under one selection plan.

    Decomposes per retained configuration with the plan's order mask,
    integrates bands, then applies weighting, standardization and the
    ranking mask when an enhancement state is given.  Output dimension is
    ``len(retained_configs) * num_bands`` before masking.
    """
    if image.width != partition.width or image.height != partition.height:
        raise ShapeError(
            f"image {image.width}x{image.height} does not match partition "
            f"{partition.width}x{partition.height}"
        )
    blocks = []
    layout = []
    for config in plan.retained_configs:
        coeffs = decompose(image, config, plan.order_mask)
        fv = integrate_bands(coeffs, partition, mode=mode)
        blocks.append(fv.values)
        layout.extend(fv.layout)
    values = np.concatenate(blocks)
    layout = tuple(layout)
    if state is None:
        return FeatureVector(values=values, layout=layout)
    kept_layout = tuple(d for d, keep in zip(layout, state.keep_mask) if keep)
    return FeatureVector(values=state.apply(values), layout=kept_layout,
                         standardized=True)
