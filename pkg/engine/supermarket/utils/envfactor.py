"""
Environment factor L(a, b) = (a^d − b^d)/(a − b) of the power-of-d drift.

Two forms live here: the closed form used by every production path, and the
phase-by-phase combinatorial sum (shortest-queue server in MAP phase l,
others split by phase with multinomial weights) kept as an independent
oracle for the invariance check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import comb, factorial, prod
from typing import Iterator

import numpy as np

from supermarket.errors import DomainError, ModelValidationError, ResourceLimitError

logger = logging.getLogger(__name__)

LIMIT_SWITCH = 1e-12
PAIR_TOL = 1e-12
MAX_ENUMERATION_TERMS = 200_000


@dataclass(frozen=True)
class LevelPair:
    """Fractions at two adjacent levels, flattened (MAP phase, service phase)-major."""

    prev: np.ndarray
    cur: np.ndarray

    def __post_init__(self) -> None:
        prev = np.asarray(self.prev, dtype=float).ravel()
        cur = np.asarray(self.cur, dtype=float).ravel()
        if prev.shape != cur.shape:
            raise ModelValidationError(
                f"prev and cur must have the same length, got {prev.size} and {cur.size}."
            )
        if np.any(cur < -PAIR_TOL) or np.any(prev < cur - PAIR_TOL):
            raise ModelValidationError("LevelPair requires prev >= cur >= 0 componentwise.")
        if prev.sum() > 1.0 + PAIR_TOL:
            raise ModelValidationError("LevelPair totals cannot exceed 1.")
        object.__setattr__(self, "prev", prev)
        object.__setattr__(self, "cur", cur)

    @property
    def a(self) -> float:
        return float(self.prev.sum())

    @property
    def b(self) -> float:
        return float(self.cur.sum())


def env_factor_closed(a: float, b: float, d: int) -> float:
    """
    Closed form (a^d − b^d)/(a − b).

    Switches to the analytic limit d·a^(d−1) when |a − b| < 1e-12·max(1, a).
    """
    if d < 1:
        raise DomainError("d must be at least 1.")
    if a < b:
        raise DomainError(f"Environment factor needs a >= b, got a={a!r}, b={b!r}.")
    if b < 0:
        raise DomainError(f"Environment factor needs b >= 0, got b={b!r}.")
    if d == 1:
        return 1.0
    if abs(a - b) < LIMIT_SWITCH * max(1.0, a):
        return d * a ** (d - 1)
    return (a**d - b**d) / (a - b)


def env_factor_levels(a: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    """Vectorised L(a, b) as the polynomial Σ_{m<d} a^(d−1−m) b^m."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    result = np.zeros(np.broadcast(a, b).shape)
    for m in range(d):
        result = result + a ** (d - 1 - m) * b**m
    return result


def env_factor_gradient(a: np.ndarray, b: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives (∂L/∂a, ∂L/∂b) of the polynomial form."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(a, b).shape
    d_a = np.zeros(shape)
    d_b = np.zeros(shape)
    for m in range(d):
        if d - 1 - m > 0:
            d_a = d_a + (d - 1 - m) * a ** (d - 2 - m) * b**m
        if m > 0:
            d_b = d_b + m * a ** (d - 1 - m) * b ** (m - 1)
    return d_a, d_b


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All tuples of ``parts`` non-negative integers summing to ``total``."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first, *rest)


def _multinomial(parts: tuple[int, ...]) -> int:
    return factorial(sum(parts)) // prod(factorial(p) for p in parts)


def _weighted_power_sum(
    bases: np.ndarray, total: int, counter: list[int], exclude_only: int | None = None
) -> float:
    """
    Σ over compositions r of ``total`` of multinomial(r)·Π bases_i^r_i.

    With ``exclude_only`` set, the composition where every unit sits on that
    index is skipped (the "at least one other phase" restriction).
    """
    value = 0.0
    for parts in _compositions(total, len(bases)):
        counter[0] += 1
        if counter[0] > MAX_ENUMERATION_TERMS:
            raise ResourceLimitError(
                f"Combinatorial enumeration exceeded {MAX_ENUMERATION_TERMS} terms."
            )
        if exclude_only is not None and parts[exclude_only] == total and total > 0:
            continue
        term = 1.0
        for base, power in zip(bases, parts):
            if power:
                if base == 0.0:
                    term = 0.0
                    break
                term *= base**power
        if term:
            value += _multinomial(parts) * term
    return value


def env_factor_combinatorial(pair: LevelPair, l: int, d: int, m_A: int, m_B: int) -> float:
    """
    Selection factor seen from MAP phase ``l`` (0-based), summed part by part.

    Part one: the joined server is in phase l and every longer sampled server
    is in phase l as well. Part two: as part one, but at least one longer
    server sits in another phase. Part three: m sampled servers tie at the
    shortest length, m₁ of them in phase l and m − m₁ in other phases, and
    the customer picks a phase-l one with probability m₁/m.
    """
    if not 0 <= l < m_A:
        raise ModelValidationError(f"MAP phase index l={l} out of range for m_A={m_A}.")
    if pair.prev.size != m_A * m_B:
        raise ModelValidationError(
            f"LevelPair length {pair.prev.size} does not match m_A*m_B={m_A * m_B}."
        )
    if d < 1:
        raise DomainError("d must be at least 1.")

    gaps = (pair.prev - pair.cur).reshape(m_A, m_B).sum(axis=1)
    above = pair.cur.reshape(m_A, m_B).sum(axis=1)
    gap_l = gaps[l]
    above_l = above[l]
    other_gaps = np.delete(gaps, l)
    counter = [0]

    part_one = sum(comb(d, m) * gap_l ** (m - 1) * above_l ** (d - m) for m in range(1, d + 1))

    part_two = 0.0
    for m in range(1, d):
        weight = comb(d, m) * gap_l ** (m - 1)
        if weight == 0.0:
            continue
        part_two += weight * _weighted_power_sum(above, d - m, counter, exclude_only=l)

    part_three = 0.0
    for m in range(2, d + 1):
        longer = _weighted_power_sum(above, d - m, counter)
        if longer == 0.0:
            continue
        for m_1 in range(1, m):
            weight = comb(d, m) * (m_1 / m) * comb(m, m_1) * gap_l ** (m_1 - 1)
            if weight == 0.0:
                continue
            ties = _weighted_power_sum(other_gaps, m - m_1, counter)
            part_three += weight * ties * longer

    return float(part_one + part_two + part_three)


def check_invariance(
    pair: LevelPair, d: int, m_A: int, m_B: int, tol: float = 1e-10
) -> tuple[bool, float]:
    """
    Compare the per-phase combinatorial factor with the closed form.

    Returns (ok, max relative deviation over MAP phases).
    """
    closed = env_factor_closed(pair.a, max(0.0, min(pair.b, pair.a)), d)
    scale = max(1.0, abs(closed))
    deviation = 0.0
    for l in range(m_A):
        value = env_factor_combinatorial(pair, l, d, m_A, m_B)
        deviation = max(deviation, abs(value - closed) / scale)
    ok = deviation <= tol
    if not ok:
        logger.debug("Invariance deviation %.3e exceeds tol %.1e for d=%d", deviation, tol, d)
    return ok, deviation
