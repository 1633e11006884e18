"""Certified security levels for ensemble majority-vote federated learning.

Everything that decides a probabilistic-grouping certificate is computed with
:class:`fractions.Fraction`, so strict inequalities that sit exactly on a
``1 / C(n, k)`` grid point are never decided by float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from ._beta import beta_ppf
from .errors import DomainError, PreconditionError

__all__ = [
    "LabelHistogram",
    "ProbabilityBounds",
    "survival_ratio",
    "p_condition_holds",
    "quantize_bounds",
    "certify_p_exact",
    "certify_p_bounds",
    "clopper_pearson_lower",
    "tie_broken_argmax",
    "worst_competitor",
    "d_condition_holds",
    "certify_d",
]


@dataclass(frozen=True)
class LabelHistogram:
    """Per-label vote counts of an ensemble for one input."""

    counts: tuple[int, ...]

    def __init__(self, counts: Sequence[int]):
        counts = tuple(int(c) for c in counts)
        if len(counts) < 2:
            raise DomainError("a label histogram needs at least two labels")
        if any(c < 0 for c in counts):
            raise DomainError(f"counts must be non-negative, got {counts}")
        if sum(counts) == 0:
            raise DomainError("a label histogram must count at least one model")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def num_labels(self) -> int:
        return len(self.counts)

    def __getitem__(self, label: int) -> int:
        return self.counts[label]


@dataclass(frozen=True)
class ProbabilityBounds:
    """Lower bound on the top label's probability, upper bound on the runner-up's.

    Either field may be a float or a :class:`~fractions.Fraction`; pass
    fractions when the bounds are exact grid values, since e.g. the float
    nearest 1/3 lies below 1/3 and would floor to the previous grid point.
    """

    lower_y: float | Fraction
    upper_z: float | Fraction

    def __post_init__(self):
        for name in ("lower_y", "upper_z"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")


def _check_nk(n: int, k: int) -> None:
    if n < 1 or k < 1 or k > n:
        raise DomainError(f"need 1 <= k <= n, got n={n}, k={k}")


def survival_ratio(n: int, k: int, m: int) -> Fraction:
    """Fraction of the ``C(n, k)`` groups of size ``k`` that avoid ``m`` fixed clients."""
    _check_nk(n, k)
    if not 0 <= m <= n - k:
        raise DomainError(f"m must lie in [0, n-k] = [0, {n - k}], got {m}")
    return Fraction(math.comb(n - m, k), math.comb(n, k))


def p_condition_holds(gap: Fraction, n: int, k: int, m: int) -> bool:
    """Whether a probability gap survives ``m`` malicious clients under random grouping."""
    return gap > 2 - 2 * survival_ratio(n, k, m)


def _largest_m(gap: Fraction, n: int, k: int) -> int:
    # The right-hand side grows with m, so the first failure ends the scan.
    level = 0
    for m in range(1, n - k + 1):
        if not p_condition_holds(gap, n, k, m):
            break
        level = m
    return level


def certify_p_exact(p_y: Fraction, p_z: Fraction, n: int, k: int) -> int:
    """Certified level from exact label probabilities over all ``C(n, k)`` groups.

    Both probabilities must be integer multiples of ``1 / C(n, k)``.
    """
    _check_nk(n, k)
    p_y, p_z = Fraction(p_y), Fraction(p_z)
    total = math.comb(n, k)
    for name, p in (("p_y", p_y), ("p_z", p_z)):
        if not 0 <= p <= 1 or (p * total).denominator != 1:
            raise DomainError(f"{name}={p} is not a multiple of 1/{total} in [0, 1]")
    if p_y <= p_z:
        raise PreconditionError(f"p_y={p_y} must exceed p_z={p_z}")
    return _largest_m(p_y - p_z, n, k)


def quantize_bounds(bounds: ProbabilityBounds, n: int, k: int) -> tuple[Fraction, Fraction]:
    """Snap bounds onto the ``1 / C(n, k)`` grid: lower bound up, upper bound down.

    The float bounds are converted exactly (``Fraction(float)`` is lossless)
    before the ceiling and floor are taken.
    """
    total = math.comb(n, k)
    lower = Fraction(math.ceil(Fraction(bounds.lower_y) * total), total)
    upper = Fraction(math.floor(Fraction(bounds.upper_z) * total), total)
    return lower, upper


def certify_p_bounds(bounds: ProbabilityBounds, n: int, k: int) -> int:
    """Certified level from a lower bound on ``p_y`` and an upper bound on ``p_z``."""
    _check_nk(n, k)
    if bounds.lower_y <= bounds.upper_z:
        raise PreconditionError(
            f"lower_y={bounds.lower_y} must exceed upper_z={bounds.upper_z}; abstain instead"
        )
    lower, upper = quantize_bounds(bounds, n, k)
    return _largest_m(lower - upper, n, k)


def clopper_pearson_lower(successes: int, trials: int, alpha: float) -> float:
    """One-sided ``1 - alpha`` Clopper-Pearson lower bound for a binomial proportion."""
    if trials < 1:
        raise DomainError(f"trials must be positive, got {trials}")
    if not 0 <= successes <= trials:
        raise DomainError(f"successes must lie in [0, {trials}], got {successes}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if successes == 0:
        return 0.0
    return beta_ppf(alpha, successes, trials - successes + 1)


def tie_broken_argmax(counts: Sequence[int]) -> int:
    """Index of the largest count, smallest index on ties."""
    best = 0
    for j, c in enumerate(counts):
        if c > counts[best]:
            best = j
    return best


def worst_competitor(counts: Sequence[int], y: int) -> tuple[int, int]:
    """Return ``(z, n_z + [z < y])`` maximized over labels ``z != y``.

    Ties among competitors go to the smallest index.
    """
    z, score = -1, -1
    for j, c in enumerate(counts):
        if j == y:
            continue
        s = c + (1 if j < y else 0)
        if s > score:
            z, score = j, s
    return z, score


def d_condition_holds(hist: LabelHistogram, y: int, m: int) -> bool:
    """Worst-case check that ``y`` still wins after ``m`` groups each flip one vote.

    Each corrupted group costs ``y`` one vote and hands it to the strongest
    competitor; ``y`` survives a tie only against larger label indices.
    """
    n_y = hist[y] - m
    for j, c in enumerate(hist.counts):
        if j == y:
            continue
        n_j = c + m
        if n_j > n_y or (n_j == n_y and j < y):
            return False
    return True


def certify_d(hist: LabelHistogram, y: int) -> int:
    """Certified level for disjoint hash grouping."""
    if not 0 <= y < hist.num_labels:
        raise DomainError(f"label {y} outside [0, {hist.num_labels})")
    if tie_broken_argmax(hist.counts) != y:
        raise PreconditionError(f"label {y} is not the tie-broken majority of {hist.counts}")
    _, competitor = worst_competitor(hist.counts, y)
    return max(0, (hist[y] - competitor) // 2)
