"""Error-bounded piecewise linear models over sorted 64-bit keys.

A segment predicts the slot of a key as::

    ((slope_fx * (key - first_key)) >> FRAC_BITS) + intercept

with ``slope_fx`` an unsigned 64-bit fixed-point value (Q1.63) and the
product taken at 128-bit width. Training works directly in that integer
domain, so the error bound holds for the exact arithmetic used at query
time rather than for a floating-point stand-in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

FRAC_BITS = 63
ONE_FX = 1 << FRAC_BITS
SLOPE_MAX = (1 << 64) - 1
KEY_MAX = (1 << 64) - 1


class DuplicateKeyError(ValueError):
    """Raised when training input is not strictly increasing."""


@dataclass(frozen=True, slots=True)
class EpsilonConfig:
    eps_inner: int = 4
    eps_leaf: int = 8
    infinite_mode: bool = False

    def __post_init__(self) -> None:
        if not self.infinite_mode:
            if self.eps_inner < 1:
                raise ValueError(f"eps_inner must be >= 1, got {self.eps_inner}")
            if self.eps_leaf < 1:
                raise ValueError(f"eps_leaf must be >= 1, got {self.eps_leaf}")


@dataclass(frozen=True, slots=True)
class PlaSegment:
    first_key: int
    slope_fx: int
    intercept: int
    epsilon: int
    covered_count: int

    def predict(self, key: int) -> int:
        return predict(self, key)

    @property
    def slope(self) -> float:
        return self.slope_fx / ONE_FX


def predict(segment: PlaSegment, key: int) -> int:
    # Keys below first_key clamp to offset 0 so the product stays an
    # unsigned 64x64 -> 128-bit multiply.
    offset = key - segment.first_key
    if offset <= 0:
        return segment.intercept
    return ((segment.slope_fx * offset) >> FRAC_BITS) + segment.intercept


def verify_bound(
    segment: PlaSegment, keys: Sequence[int], positions: Sequence[int]
) -> bool:
    """True iff every ``(key, position)`` is predicted within ``segment.epsilon``."""
    eps = segment.epsilon
    k0 = segment.first_key
    s = segment.slope_fx
    b = segment.intercept
    for key, pos in zip(keys, positions):
        off = key - k0
        p = b if off <= 0 else ((s * off) >> FRAC_BITS) + b
        if p - pos > eps or pos - p > eps:
            return False
    return True


def _check_sorted(keys: Sequence[int]) -> None:
    prev = -1
    for i, k in enumerate(keys):
        if k <= prev:
            if k == prev:
                raise DuplicateKeyError(f"duplicate key {k} at index {i}")
            raise DuplicateKeyError(f"keys not increasing at index {i}: {prev} then {k}")
        prev = k


def _fit(keys: Sequence[int], start: int, eps: int, max_len: int) -> tuple[int, int, int]:
    """Extend a segment from ``start`` as far as some (intercept, slope) fits.

    One slope interval ("cone") is kept per admissible integer intercept in
    ``[-eps, eps]``; a point narrows every cone, and the segment ends when all
    cones are empty. Returns ``(end, intercept, slope_fx)``.
    """
    n = len(keys)
    k0 = keys[start]
    one = ONE_FX
    cones = [(b, 0, SLOPE_MAX) for b in sorted(range(-eps, eps + 1), key=lambda v: (abs(v), v))]
    end = start + 1
    limit = min(n, start + max_len)
    last_x = 0
    last_y = 0
    while end < limit:
        x = keys[end] - k0
        y = end - start
        survivors = []
        for b, lo, hi in cones:
            t = y - eps - b
            if t > 0:
                c = -((-t * one) // x)
                if c > lo:
                    lo = c
            u = y + eps - b + 1
            if u <= 0:
                continue
            c = (u * one - 1) // x
            if c < hi:
                hi = c
            if lo <= hi:
                survivors.append((b, lo, hi))
        if not survivors:
            break
        cones = survivors
        last_x, last_y = x, y
        end += 1
    b, lo, hi = cones[0]
    if last_x == 0:
        slope = 0
    else:
        # Secant through (0, b) and the last covered point, clamped into the cone.
        slope = ((last_y - b) * one + last_x // 2) // last_x
        slope = min(max(slope, lo), hi)
    return end, b, slope


def train_segments(
    sorted_keys: Sequence[int],
    epsilon: int,
    *,
    max_len: int | None = None,
    infinite_mode: bool = False,
) -> list[tuple[int, PlaSegment]]:
    """Greedy left-to-right segmentation of ``sorted_keys``.

    Returns ``(start_index, segment)`` pairs. Positions are local to each
    segment (slot 0 is the segment's first key). ``max_len`` caps the number
    of keys per segment; in ``infinite_mode`` segments are plain chunks of
    ``max_len`` keys whose model is unused (lookups binary-search).
    """
    n = len(sorted_keys)
    if n == 0:
        return []
    _check_sorted(sorted_keys)
    if infinite_mode:
        if max_len is None:
            raise ValueError("infinite_mode requires max_len")
        out = []
        for start in range(0, n, max_len):
            cnt = min(max_len, n - start)
            out.append((start, PlaSegment(sorted_keys[start], 0, 0, KEY_MAX, cnt)))
        return out
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    cap = n if max_len is None else max_len
    if cap < 1:
        raise ValueError("max_len must be >= 1")
    out = []
    start = 0
    while start < n:
        end, b, slope = _fit(sorted_keys, start, epsilon, cap)
        while True:
            seg = PlaSegment(sorted_keys[start], slope, b, epsilon, end - start)
            if verify_bound(seg, sorted_keys[start:end], range(end - start)):
                break
            # Not reachable with exact cone arithmetic; kept as a guard.
            end, b, slope = _fit(sorted_keys, start, epsilon, end - start - 1)
        out.append((start, seg))
        start = end
    return out
