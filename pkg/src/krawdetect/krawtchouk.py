"""Weighted Krawtchouk polynomial tables and the 2D orthogonal image decomposition.

The weighted Krawtchouk polynomial of order ``l`` on the integer grid
``z = 0..L`` with localization parameter ``P`` in (0, 1) is

    Kbar_l(z; P, L) = sqrt(w(z) / rho(l)) * k_l(z),

where ``w(z) = C(L, z) P^z (1-P)^(L-z)`` is the binomial weight,
``rho(l) = ((1-P)/P)^l / C(L, l)`` the squared norm of the classical
polynomial ``k_l(z) = 2F1(-l, -z; -L; 1/P)``.  The rows of a table are
orthonormal over the grid, which makes the induced separable 2D transform
invertible and exactly linear.

Two independent evaluation paths are provided: a three-term recurrence
(production path, used to build tables) and a terminating hypergeometric
series (reference path, used to validate the recurrence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import IncompleteError, OrderError, RangeError, StabilityError
from .image_io import Image

#: Default tolerance on |<row_l, row_l'> - delta_ll'| for retained orders.
DEFAULT_ORTHOTOL = 1e-8

#: Default cap on the highest order kept in a table (min(bound, this)).
DEFAULT_MAX_ORDER_CAP = 48


@dataclass(frozen=True)
class SpatialConfig:
    """Per-axis localization parameters of the separable 2D basis.

    Values below 0.5 concentrate the basis zeros toward the low-index edge
    of the axis, 0.5 spreads them evenly, values above 0.5 concentrate them
    toward the high-index edge.  Both must lie strictly inside (0, 1).
    """

    px: float
    py: float

    def __post_init__(self):
        for name, value in (("px", self.px), ("py", self.py)):
            if not 0.0 < value < 1.0:
                raise RangeError(f"{name} must lie strictly inside (0, 1), got {value}")


@dataclass(frozen=True, eq=False)
class PolynomialTable:
    """Orthonormal table of weighted Krawtchouk values.

    Attributes
    ----------
    p : float
        Localization parameter in (0, 1).
    bound : int
        Grid upper end; the grid is ``z = 0..bound`` (bound + 1 points).
    max_order : int
        Highest retained order; ``values`` has ``max_order + 1`` rows.
    values : numpy.ndarray
        Shape ``(max_order + 1, bound + 1)``; ``values[l][z]`` is
        ``Kbar_l(z; p, bound)``.
    requested_max_order : int
        The order originally asked for; larger than ``max_order`` when
        stability truncation dropped high orders.
    truncated_orders : tuple of int
        Orders dropped by stability truncation (empty when none).
    """

    p: float
    bound: int
    max_order: int
    values: np.ndarray
    requested_max_order: int
    truncated_orders: tuple = ()

    @property
    def truncated(self) -> bool:
        return bool(self.truncated_orders)


def _validate_p(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise RangeError(f"localization parameter must lie in (0, 1), got {p}")


def weighted_order_zero(p: float, bound: int) -> np.ndarray:
    """Row 0 of the table: the square-rooted binomial weight.

    Computed in log space (log-gamma) so that large ``bound`` does not
    overflow the binomial coefficient.
    """
    _validate_p(p)
    z = np.arange(bound + 1, dtype=float)
    logw = (
        gammaln(bound + 1.0)
        - gammaln(z + 1.0)
        - gammaln(bound - z + 1.0)
        + z * math.log(p)
        + (bound - z) * math.log1p(-p)
    )
    return np.exp(0.5 * logw)


def _recurrence_rows(p: float, bound: int, max_order: int) -> np.ndarray:
    """All rows 0..max_order via the normalized three-term recurrence."""
    L = float(bound)
    z = np.arange(bound + 1, dtype=float)
    rows = np.empty((max_order + 1, bound + 1))
    rows[0] = weighted_order_zero(p, bound)
    if max_order >= 1:
        # Order 1 in closed form, including the 1/sqrt(rho(1)) norm factor.
        rows[1] = (1.0 - z / (p * L)) * rows[0] * math.sqrt(p * L / (1.0 - p))
    for l in range(1, max_order):
        a = (L * p - 2.0 * l * p + l - z) / math.sqrt(
            p * (1.0 - p) * (l + 1.0) * (L - l)
        )
        b = math.sqrt(l * (L - l + 1.0) / ((l + 1.0) * (L - l)))
        rows[l + 1] = a * rows[l] - b * rows[l - 1]
    return rows


def _pairwise_deviation(rows: np.ndarray) -> np.ndarray:
    gram = rows @ rows.T
    return np.abs(gram - np.eye(rows.shape[0]))


def build_polynomial_table(
    p: float,
    bound: int,
    max_order: int | None = None,
    orthotol: float = DEFAULT_ORTHOTOL,
) -> PolynomialTable:
    """Build the orthonormal table for grid ``0..bound``.

    Row 0 is the square-rooted binomial weight (log-space), row 1 its
    closed-form first-order companion, and rows 2..max_order follow the
    three-term recurrence.  After construction the pairwise inner products
    of all rows are checked against ``orthotol``; orders above the last
    numerically orthonormal one are dropped and recorded in
    ``truncated_orders`` rather than silently kept.

    Parameters
    ----------
    p : float
        Localization parameter, strictly inside (0, 1).
    bound : int
        Grid upper end (``bound + 1`` grid points).
    max_order : int, optional
        Highest order to compute; defaults to ``min(bound, 48)``.
    orthotol : float, optional
        Tolerance on the orthonormality deviation of retained orders.

    Raises
    ------
    RangeError
        If ``p`` is outside (0, 1) or ``bound < 1``.
    OrderError
        If ``max_order > bound``.
    StabilityError
        If not even order 0 meets the tolerance.
    """
    _validate_p(p)
    if bound < 1:
        raise RangeError(f"grid bound must be >= 1, got {bound}")
    if max_order is None:
        max_order = min(bound, DEFAULT_MAX_ORDER_CAP)
    if max_order > bound:
        raise OrderError(f"max_order {max_order} exceeds grid bound {bound}")
    if max_order < 0:
        raise RangeError(f"max_order must be >= 0, got {max_order}")

    rows = _recurrence_rows(p, bound, max_order)
    dev = _pairwise_deviation(rows)

    # Largest k such that every pair of orders <= k meets the tolerance.
    keep = max_order
    running = 0.0
    for k in range(max_order + 1):
        running = max(running, float(dev[k, : k + 1].max()))
        if running > orthotol:
            keep = k - 1
            break
    if keep < 0:
        raise StabilityError(
            f"order 0 deviates from unit mass by {dev[0, 0]:.3e} "
            f"(tolerance {orthotol:.1e}) for p={p}, bound={bound}"
        )

    truncated = tuple(range(keep + 1, max_order + 1))
    return PolynomialTable(
        p=p,
        bound=bound,
        max_order=keep,
        values=rows[: keep + 1],
        requested_max_order=max_order,
        truncated_orders=truncated,
    )


def eval_hypergeometric_reference(l: int, z: int, p: float, bound: int) -> float:
    """Reference value of ``Kbar_l(z; p, bound)`` via the terminating series.

    Because the first series parameter is the non-positive integer ``-l``,
    the hypergeometric sum has exactly ``l + 1`` terms.  Pochhammer symbols
    are accumulated by iterative products, and the gamma-ratio part of the
    norm is evaluated through its pole-free closed form
    ``(-1)^l l! / ((-L)(-L+1)...(-L+l-1))``.

    All inputs are rational (``p`` is taken at its exact binary-float
    value), so everything up to the final square root is carried out in
    exact rational arithmetic; the alternating series would otherwise lose
    many digits to cancellation.  This is the slow scalar oracle used to
    validate the recurrence path; it shares no code with
    :func:`build_polynomial_table`.
    """
    from fractions import Fraction

    _validate_p(p)
    if l < 0 or l > bound:
        raise OrderError(f"order {l} outside 0..{bound}")
    if z < 0 or z > bound:
        raise RangeError(f"grid point {z} outside 0..{bound}")

    pf = Fraction(p)

    # Terminating 2F1(-l, -z; -L; 1/p): l + 1 terms, iterative Pochhammers.
    series = Fraction(1)
    term = Fraction(1)
    for k in range(l):
        term *= Fraction((-l + k) * (-z + k), (-bound + k) * (k + 1)) / pf
        series += term
    if series == 0:
        return 0.0

    # (-1)^l * l! * Gamma(-L)/Gamma(l-L) without evaluating gamma at poles.
    poch = 1
    for j in range(l):
        poch *= -bound + j
    gamma_ratio = Fraction((-1) ** l * math.factorial(l), poch)

    rho = ((1 - pf) / pf) ** l * gamma_ratio
    weight = math.comb(bound, z) * pf**z * (1 - pf) ** (bound - z)
    magnitude = math.sqrt(float(weight / rho * series * series))
    return magnitude if series > 0 else -magnitude


def orthonormality_deviation(p: float, bound: int, max_order: int) -> float:
    """Worst-case deviation of the table rows from exact orthonormality.

    Returns ``max_{l, l' <= max_order} |<row_l, row_l'> - delta_ll'|``
    computed by direct double-precision summation, without the truncation
    applied by :func:`build_polynomial_table` (this function measures what
    that one enforces).
    """
    _validate_p(p)
    if bound < 1:
        raise RangeError(f"grid bound must be >= 1, got {bound}")
    if max_order > bound:
        raise OrderError(f"max_order {max_order} exceeds grid bound {bound}")
    if max_order < 0:
        raise RangeError(f"max_order must be >= 0, got {max_order}")
    rows = _recurrence_rows(p, bound, max_order)
    return float(_pairwise_deviation(rows).max())


@lru_cache(maxsize=128)
def _cached_table(p: float, bound: int, max_order: int) -> PolynomialTable:
    return build_polynomial_table(p, bound, max_order)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Decomposition coefficients for one or more spatial configurations.

    ``values[i][j]`` is the coefficient of ``configs[i]`` at frequency
    order ``orders[j]``; the logical key of an entry is the triple
    ``(n, m, config)``.
    """

    width: int
    height: int
    configs: tuple
    orders: tuple
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.configs) * len(self.orders)

    def value(self, n: int, m: int, config: SpatialConfig | None = None) -> float:
        if config is None:
            if len(self.configs) != 1:
                raise KeyError("config is required when several are present")
            config = self.configs[0]
        ci = self.configs.index(config)
        oi = self.orders.index((n, m))
        return float(self.values[ci, oi])

    def items(self):
        """Iterate ``((n, m, config), coefficient)`` pairs in layout order."""
        for ci, config in enumerate(self.configs):
            for oi, (n, m) in enumerate(self.orders):
                yield (n, m, config), float(self.values[ci, oi])


def full_order_set(width: int, height: int) -> tuple:
    """All frequency orders supported by a width x height image."""
    return tuple((n, m) for n in range(width) for m in range(height))


def _axis_tables(config: SpatialConfig, width: int, height: int,
                 max_n: int, max_m: int) -> tuple[PolynomialTable, PolynomialTable]:
    tx = _cached_table(config.px, width - 1, max_n)
    ty = _cached_table(config.py, height - 1, max_m)
    for t, requested in ((tx, max_n), (ty, max_m)):
        if t.max_order < requested:
            raise StabilityError(
                f"table for p={t.p}, bound={t.bound} is stable only up to "
                f"order {t.max_order}, but order {requested} was requested"
            )
    return tx, ty


def decompose(image: Image, config: SpatialConfig,
              order_mask: Iterable[tuple[int, int]]) -> CoefficientSet:
    """Project an image onto the separable basis for one configuration.

    The coefficient at order ``(n, m)`` is the discrete inner product

        c_{n,m} = sum_x sum_y Kbar_n(x; px, W-1) Kbar_m(y; py, H-1) f(x, y)

    (the basis is real-valued, so no conjugation is involved).  The map is
    exactly linear in the image: ``decompose(x + d) = decompose(x) +
    decompose(d)`` entrywise up to float rounding.

    ``order_mask`` is an ordered iterable of ``(n, m)`` pairs; its order is
    preserved in the result.
    """
    orders = tuple(order_mask)
    if not orders:
        raise OrderError("order mask is empty")
    max_n = max(n for n, _ in orders)
    max_m = max(m for _, m in orders)
    if max_n > image.width - 1 or max_m > image.height - 1:
        raise OrderError(
            f"order ({max_n}, {max_m}) exceeds image capability "
            f"({image.width - 1}, {image.height - 1})"
        )
    tx, ty = _axis_tables(config, image.width, image.height, max_n, max_m)
    f = image.as_matrix()  # (H, W), f[y, x]
    coeff = tx.values @ f.T @ ty.values.T  # coeff[n, m]
    n_idx = np.fromiter((n for n, _ in orders), dtype=int, count=len(orders))
    m_idx = np.fromiter((m for _, m in orders), dtype=int, count=len(orders))
    return CoefficientSet(
        width=image.width,
        height=image.height,
        configs=(config,),
        orders=orders,
        values=coeff[n_idx, m_idx][None, :],
    )


def reconstruct(coeffs: CoefficientSet) -> Image:
    """Invert :func:`decompose` for a complete single-configuration set.

    Requires every order ``(n, m)`` with ``n <= W-1`` and ``m <= H-1`` for
    exactly one configuration; orthonormality of the basis then gives a
    reconstruction whose RMSE against the source image is at the level of
    float rounding.
    """
    if len(coeffs.configs) != 1:
        raise IncompleteError(
            f"reconstruction needs exactly one configuration, got {len(coeffs.configs)}"
        )
    width, height = coeffs.width, coeffs.height
    expected = full_order_set(width, height)
    if len(coeffs.orders) != len(expected) or set(coeffs.orders) != set(expected):
        raise IncompleteError(
            f"reconstruction needs all {len(expected)} orders, got {len(coeffs.orders)}"
        )
    config = coeffs.configs[0]
    tx, ty = _axis_tables(config, width, height, width - 1, height - 1)
    matrix = np.zeros((width, height))
    n_idx = np.fromiter((n for n, _ in coeffs.orders), dtype=int, count=len(coeffs.orders))
    m_idx = np.fromiter((m for _, m in coeffs.orders), dtype=int, count=len(coeffs.orders))
    matrix[n_idx, m_idx] = coeffs.values[0]
    f = tx.values.T @ matrix @ ty.values  # f[x, y]
    return Image.from_matrix(f.T)


def sign_change_count(row: Sequence[float]) -> int:
    """Number of sign alternations along a row, skipping exact zeros.

    For a stably computed table row of order ``l`` this equals ``l``: the
    row has ``l`` simple zeros and at most one of them falls between any
    two adjacent grid points.
    """
    signs = np.sign(np.asarray(row, dtype=float))
    nonzero = signs[signs != 0]
    if nonzero.size < 2:
        return 0
    return int(np.count_nonzero(nonzero[1:] != nonzero[:-1]))


def sign_change_locations(row: Sequence[float]) -> np.ndarray:
    """Midpoints of the grid intervals where a row changes sign.

    A grid point where the row is exactly zero counts as a change located
    at that point.
    """
    values = np.asarray(row, dtype=float)
    signs = np.sign(values)
    locations = []
    last_sign = 0.0
    last_index = None
    zero_since_last = False
    for i, s in enumerate(signs):
        if s == 0.0:
            locations.append(float(i))
            zero_since_last = True
            continue
        if last_sign != 0.0 and s != last_sign and not zero_since_last:
            locations.append(0.5 * (i + last_index))
        last_sign = s
        last_index = i
        zero_since_last = False
    return np.asarray(locations)
