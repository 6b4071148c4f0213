"""Blending of historical weights and truths with fresh per-cycle values.

Histories are combined with the current temporary value by inverse
temporal-distance weighting: an entry from `i` cycles ago gets coefficient
1 / (i + 1)^rho, the current value gets coefficient 1.  Each combiner is
affine in the temporary value, so it is also exposed as an (offset, scale)
pair, which is what the closed-form solver updates consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar, Sequence


@dataclass(frozen=True)
class TemporalParams:
    """Power parameters for weight/truth recency decay and history window.

    Larger rho means faster decay of old entries.  `history_window` bounds
    how many of the most recent entries are consulted (0 disables history).
    """

    rho_w: float = 1.0
    rho_t: float = 2.0
    history_window: int = 96

    def __post_init__(self):
        if self.rho_w <= 0:
            raise ValueError(f"rho_w must be > 0, got {self.rho_w}")
        if self.rho_t <= 0:
            raise ValueError(f"rho_t must be > 0, got {self.rho_t}")
        if self.history_window < 0:
            raise ValueError(f"history_window must be >= 0, got {self.history_window}")


@dataclass(frozen=True)
class AffinePair:
    """Offset/scale form of a history combiner: combined = offset + scale * v.

    For truths this is the (delta1, delta2) pair, for weights (delta3,
    delta4).  With no history the pair is the identity (0, 1).
    """

    offset: float
    scale: float

    IDENTITY: ClassVar["AffinePair"]

    def apply(self, value: float) -> float:
        return self.offset + self.scale * value


AffinePair.IDENTITY = AffinePair(0.0, 1.0)


class _History:
    """Cycle-indexed series with strictly increasing cycles."""

    __slots__ = ("owner", "entries")

    def __init__(self, owner, entries: Sequence[tuple[int, float]] = ()):
        self.owner = owner
        self.entries: list[tuple[int, float]] = []
        for cycle, value in entries:
            self.append(cycle, value)

    def append(self, cycle: int, value: float) -> None:
        if self.entries and cycle <= self.entries[-1][0]:
            raise ValueError(
                f"history for {self.owner!r}: cycle {cycle} not after {self.entries[-1][0]}"
            )
        if not math.isfinite(value):
            raise ValueError(f"history for {self.owner!r}: non-finite value {value}")
        self.entries.append((cycle, value))

    def last(self) -> tuple[int, float] | None:
        return self.entries[-1] if self.entries else None

    def recent(self, window: int) -> list[tuple[int, float]]:
        if window <= 0:
            return []
        return self.entries[-window:]

    def __len__(self) -> int:
        return len(self.entries)

    def __repr__(self):
        return f"{type(self).__name__}({self.owner!r}, {self.entries!r})"


class WeightHistory(_History):
    """Per-source series of final reliability weights."""


class TruthHistory(_History):
    """Per-grid series of final truth estimates."""


def temporal_distance(current: int, past: int) -> int:
    """Distance between cycles; the current cycle itself has distance 1."""
    if past > current:
        raise ValueError(f"past cycle {past} is after current cycle {current}")
    return (current - past) + 1


def _affine(entries: Sequence[tuple[int, float]], rho: float, t: int) -> AffinePair:
    if not entries:
        return AffinePair.IDENTITY
    coeffs = [temporal_distance(t, cycle) ** -rho for cycle, _ in entries]
    k_now = 1.0
    denom = math.fsum(coeffs) + k_now
    offset = math.fsum(k * v for k, (_, v) in zip(coeffs, entries)) / denom
    return AffinePair(offset, k_now / denom)


def delta_for_truth(hist: TruthHistory | None, params: TemporalParams, t: int) -> AffinePair:
    """Affine combiner of a grid's truth history with the temporary truth."""
    entries = hist.recent(params.history_window) if hist is not None else []
    _check_before(entries, t, hist)
    return _affine(entries, params.rho_t, t)


def delta_for_weight(hist: WeightHistory | None, params: TemporalParams, t: int) -> AffinePair:
    """Affine combiner of a source's weight history with the temporary weight."""
    entries = hist.recent(params.history_window) if hist is not None else []
    _check_before(entries, t, hist)
    return _affine(entries, params.rho_w, t)


def _check_before(entries, t: int, hist) -> None:
    if entries and entries[-1][0] >= t:
        owner = getattr(hist, "owner", "?")
        raise ValueError(f"history for {owner!r} already contains cycle >= {t}")


def combine_weight(w_temp: float, hist: WeightHistory | None, params: TemporalParams, t: int) -> float:
    """Recency-weighted blend of historical weights with the temporary one."""
    return delta_for_weight(hist, params, t).apply(w_temp)


def combine_truth(v_temp: float, hist: TruthHistory | None, params: TemporalParams, t: int) -> float:
    """Recency-weighted blend of historical truths with the temporary one."""
    return delta_for_truth(hist, params, t).apply(v_temp)
