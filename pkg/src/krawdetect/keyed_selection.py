"""Key-driven derivation of the secret decomposition parameters.

A 64-bit host key seeds a SplitMix64 stream, which blocks candidate
spatial configurations and frequency orders independently with a fixed
probability.  The surviving subsets form the selection plan: the secret
part of the detector.  Everything here is a pure function of (key, grid),
bit-identical across platforms and runs.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from itertools import product

from .errors import ConfigError, FormatError, RangeError
from .krawtchouk import SpatialConfig

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

#: Salt for deriving the audit fingerprint; not a secret, just a domain tag
#: so the fingerprint differs from the selection stream.
_FINGERPRINT_SALT = 0x4B5241574B455931

DEFAULT_SPATIAL_VALUES = (0.25, 0.375, 0.5, 0.625, 0.75)
DEFAULT_BLOCKING_PROB = 0.5
DEFAULT_MIN_RETAINED_CONFIGS = 4


@dataclass(frozen=True)
class DetectorKey:
    """The host secret: one 64-bit seed, hex-encoded when stored in files."""

    seed: int

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise RangeError(f"key seed must be a 64-bit unsigned value, got {self.seed}")


def _mix(value: int) -> int:
    value = (value ^ (value >> 30)) * _MIX1 & _MASK64
    value = (value ^ (value >> 27)) * _MIX2 & _MASK64
    return value ^ (value >> 31)


class SplitMix64:
    """The SplitMix64 generator, bit-exact across platforms.

    State advances by the golden-ratio increment and each output is the
    xor-shift-multiply mix of the new state.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform draw in [0, 1) as next_u64 / 2**64."""
        return self.next_u64() / 2.0**64

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates driven by the stream (modulo draw)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


def derive_stream(key: DetectorKey) -> SplitMix64:
    """The deterministic 64-bit value stream owned by a key."""
    return SplitMix64(key.seed)


def key_fingerprint(key: DetectorKey) -> int:
    """64-bit audit value for reports; does not reveal the stream."""
    return _mix((key.seed ^ _FINGERPRINT_SALT) & _MASK64)


def generate_key() -> DetectorKey:
    """Fresh key from OS entropy."""
    return DetectorKey(seed=secrets.randbits(64))


def write_key_file(path: str, key: DetectorKey) -> None:
    """Store a key as one hex-encoded 64-bit value, newline-terminated."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{key.seed:016x}\n")


def read_key_file(path: str) -> DetectorKey:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().strip()
    try:
        seed = int(text, 16)
    except ValueError as exc:
        raise FormatError(f"key file {path!r} is not a hex-encoded value") from exc
    if not 0 <= seed <= _MASK64:
        raise FormatError(f"key file {path!r} does not hold a 64-bit value")
    return DetectorKey(seed=seed)


@dataclass(frozen=True)
class CandidateGrid:
    """The public candidate pool the key selects from.

    ``spatial_candidates`` and ``order_candidates`` are ordered; iteration
    order is part of the selection contract.
    """

    spatial_candidates: tuple
    order_candidates: tuple
    blocking_prob: float = DEFAULT_BLOCKING_PROB
    min_retained_configs: int = DEFAULT_MIN_RETAINED_CONFIGS

    def __post_init__(self):
        if not self.spatial_candidates or not self.order_candidates:
            raise ConfigError("candidate lists must be non-empty")
        if not 0.0 <= self.blocking_prob < 1.0:
            raise ConfigError(
                f"blocking probability must lie in [0, 1), got {self.blocking_prob}"
            )
        if not 1 <= self.min_retained_configs <= len(self.spatial_candidates):
            raise ConfigError(
                f"min_retained_configs {self.min_retained_configs} outside "
                f"1..{len(self.spatial_candidates)}"
            )


def default_grid(width: int, height: int,
                 max_order: int | None = None,
                 spatial_values: tuple = DEFAULT_SPATIAL_VALUES,
                 blocking_prob: float = DEFAULT_BLOCKING_PROB,
                 min_retained_configs: int = DEFAULT_MIN_RETAINED_CONFIGS) -> CandidateGrid:
    """Candidate grid spanning left-, center- and right-localized bases.

    Order candidates are all ``(n, m)`` with both components up to
    ``min(axis bound, 48)`` unless a tighter ``max_order`` is given.
    """
    max_n = min(width - 1, 48 if max_order is None else max_order)
    max_m = min(height - 1, 48 if max_order is None else max_order)
    spatial = tuple(
        SpatialConfig(px, py) for px, py in product(spatial_values, spatial_values)
    )
    orders = tuple((n, m) for n in range(max_n + 1) for m in range(max_m + 1))
    return CandidateGrid(
        spatial_candidates=spatial,
        order_candidates=orders,
        blocking_prob=blocking_prob,
        min_retained_configs=min_retained_configs,
    )


@dataclass(frozen=True)
class SelectionPlan:
    """The realized secret: retained configs, order mask, audit fingerprint."""

    retained_configs: tuple
    order_mask: tuple
    key_fingerprint: int


def _sample_subset(stream: SplitMix64, candidates: tuple, blocking_prob: float,
                   floor: int) -> tuple:
    blocked = [stream.next_float() < blocking_prob for _ in candidates]
    retained = sum(1 for b in blocked if not b)
    if retained < floor:
        for i, b in enumerate(blocked):
            if b:
                blocked[i] = False
                retained += 1
                if retained >= floor:
                    break
    return tuple(c for c, b in zip(candidates, blocked) if not b)


def sample_plan(key: DetectorKey, grid: CandidateGrid) -> SelectionPlan:
    """Derive the selection plan for a key.

    Candidates are visited in grid order; each is blocked when the next
    uniform draw falls below the blocking probability.  If fewer spatial
    configurations than the floor survive, the lowest-index blocked ones
    are unblocked until the floor is met.  The order mask is sampled the
    same way (floor 1) from the continuation of the same stream.
    """
    stream = derive_stream(key)
    configs = _sample_subset(
        stream, grid.spatial_candidates, grid.blocking_prob, grid.min_retained_configs
    )
    orders = _sample_subset(stream, grid.order_candidates, grid.blocking_prob, 1)
    return SelectionPlan(
        retained_configs=configs,
        order_mask=orders,
        key_fingerprint=key_fingerprint(key),
    )
