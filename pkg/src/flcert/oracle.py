"""Brute-force verifiers for certificates on small instances.

The certificate checks use nothing from :mod:`flcert.certify` apart from the
histogram type: each one enumerates adversaries directly, so agreement with
the closed forms is evidence rather than a tautology. The coverage check is
the exception by design; it measures the confidence bound it is given.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from .certify import LabelHistogram, clopper_pearson_lower
from .errors import CapacityError, DomainError

MAX_D_GROUPS = 12
MAX_D_LABELS = 5
MAX_P_CLIENTS = 8
MAX_P_GROUP = 3


def _winner(counts: Sequence[int]) -> int:
    best_label, best_count = 0, counts[0]
    for label in range(1, len(counts)):
        if counts[label] > best_count:
            best_label, best_count = label, counts[label]
    return best_label


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All ways to write ``total`` as an ordered sum of ``parts`` non-negative ints."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _bounded_removals(counts: Sequence[int], total: int) -> Iterator[tuple[int, ...]]:
    for removal in _compositions(total, len(counts)):
        if all(r <= c for r, c in zip(removal, counts)):
            yield removal


def oracle_certify_d(hist: LabelHistogram, y: int, m: int) -> bool:
    """Whether no corruption of at most ``m`` group models can move the vote off ``y``.

    Groups are interchangeable once their labels are fixed, so an adversary
    is a choice of how many ``label``-voting groups to corrupt plus any
    redistribution of those votes. Corrupting exactly ``min(m, N)`` groups
    covers smaller adversaries, since a corrupted group may keep its vote.
    """
    N, L = hist.total, hist.num_labels
    if N > MAX_D_GROUPS or L > MAX_D_LABELS:
        raise CapacityError(f"oracle limited to N <= {MAX_D_GROUPS}, L <= {MAX_D_LABELS}")
    if m < 0:
        raise DomainError("m must be non-negative")
    counts = list(hist.counts)
    corrupted = min(m, N)
    for removal in _bounded_removals(counts, corrupted):
        base = [c - r for c, r in zip(counts, removal)]
        for added in _compositions(corrupted, L):
            if _winner([b + a for b, a in zip(base, added)]) != y:
                return False
    return True


def oracle_max_m_d(hist: LabelHistogram, y: int) -> int:
    """Largest ``m`` accepted by :func:`oracle_certify_d`, or -1 if ``y`` does not win."""
    level = -1
    for m in range(hist.total + 1):
        if not oracle_certify_d(hist, y, m):
            break
        level = m
    return level


def oracle_certify_p_exact(label_table: Mapping[tuple[int, ...], int], malicious_set, y: int,
                           num_labels: int) -> bool:
    """Whether ``y`` keeps a strict plurality after the malicious clients strike.

    ``label_table`` maps every ``k``-subset of clients to the label its model
    predicts. Every subset touching ``malicious_set`` is rewritten to one
    adversarial label; all choices of that label are tried.
    """
    subsets = list(label_table)
    if not subsets:
        raise DomainError("empty label table")
    n = 1 + max(max(s) for s in subsets)
    k = len(subsets[0])
    if n > MAX_P_CLIENTS or k > MAX_P_GROUP:
        raise CapacityError(f"oracle limited to n <= {MAX_P_CLIENTS}, k <= {MAX_P_GROUP}")
    bad = set(malicious_set)
    for target in range(num_labels):
        counts = [0] * num_labels
        for subset, label in label_table.items():
            counts[target if bad.intersection(subset) else label] += 1
        if any(counts[j] >= counts[y] for j in range(num_labels) if j != y):
            return False
    return True


def oracle_max_m_p_exact(label_table: Mapping[tuple[int, ...], int], n: int, y: int,
                         num_labels: int) -> int:
    """Largest ``m`` such that every malicious set of size ``<= m`` leaves ``y`` on top."""
    level = -1
    for m in range(n + 1):
        if not all(
            oracle_certify_p_exact(label_table, bad, y, num_labels)
            for bad in itertools.combinations(range(n), m)
        ):
            break
        level = m
    return level


def worst_case_table(counts: Sequence[int], n: int, k: int, malicious: Sequence[int]) -> dict:
    """Label table with the given per-label counts that is hardest to defend.

    Labels other than the plurality label are placed on subsets that avoid
    ``malicious`` first, so the attackers' subsets vote for the plurality
    label wherever possible.
    """
    subsets = list(itertools.combinations(range(n), k))
    if sum(counts) != len(subsets):
        raise DomainError(f"counts sum to {sum(counts)}, expected C({n},{k}) = {len(subsets)}")
    y = _winner(counts)
    bad = set(malicious)
    order = sorted(subsets, key=lambda s: bool(bad.intersection(s)))
    others = [j for j in range(len(counts)) if j != y for _ in range(counts[j])]
    table = {}
    for i, s in enumerate(order):
        table[s] = others[i] if i < len(others) else y
    return table


def coverage_test_cp(p_true: float, N: int, alpha: float, trials: int, seed: int) -> float:
    """Monte Carlo rate at which the Clopper-Pearson lower bound exceeds ``p_true``."""
    if trials < 1000:
        raise DomainError(f"need at least 1000 trials, got {trials}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    rng = np.random.default_rng(seed)
    draws = rng.binomial(N, p_true, size=trials)
    lower = {s: clopper_pearson_lower(int(s), N, alpha) for s in np.unique(draws)}
    misses = sum(1 for s in draws if lower[s] > p_true)
    return misses / trials


def miscoverage_allowance(alpha: float, trials: int, sigmas: float = 3.0) -> float:
    """``alpha`` plus a ``sigmas``-standard-error Monte Carlo allowance."""
    return alpha + sigmas * math.sqrt(alpha * (1 - alpha) / trials)
