"""Spot-checks for certificate records: recomputation, maximality, brute force."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .certify import (
    LabelHistogram,
    ProbabilityBounds,
    certify_d,
    certify_p_bounds,
    certify_p_exact,
    clopper_pearson_lower,
    d_condition_holds,
    p_condition_holds,
    quantize_bounds,
    tie_broken_argmax,
)
from .oracle import MAX_D_GROUPS, MAX_D_LABELS, oracle_max_m_d

CP_TOLERANCE = 1e-12


def d_level_is_maximal(hist: LabelHistogram, y: int, level: int) -> bool:
    """Worst-case condition holds at ``level`` and, below ``N``, fails at ``level + 1``."""
    if not d_condition_holds(hist, y, level):
        return False
    return level >= hist.total or not d_condition_holds(hist, y, level + 1)


def p_level_is_maximal(gap: Fraction, n: int, k: int, level: int) -> bool:
    """Probability-gap condition holds at ``level`` and, below ``n - k``, fails at ``level + 1``."""
    if not p_condition_holds(gap, n, k, level):
        return False
    return level >= n - k or not p_condition_holds(gap, n, k, level + 1)


@dataclass
class VerifyReport:
    checked: int = 0
    oracle_checked: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_records(header: dict, records: list[dict], limit: int | None = None) -> VerifyReport:
    """Re-derive every certificate in ``records`` and report mismatches."""
    mode, n, k, N = header["mode"], header["n"], header["k"], header["N"]
    report = VerifyReport()
    for rec in records[:limit]:
        idx = rec["index"]
        hist = LabelHistogram(rec["counts"])
        report.checked += 1
        if hist.total != N:
            report.failures.append(f"#{idx}: counts sum to {hist.total}, expected N={N}")
            continue

        if mode == "D":
            y, level = rec["label"], rec["level"]
            if y != tie_broken_argmax(hist.counts):
                report.failures.append(f"#{idx}: label {y} is not the tie-broken majority")
                continue
            if level != certify_d(hist, y):
                report.failures.append(f"#{idx}: level {level} != recomputed {certify_d(hist, y)}")
            if not d_level_is_maximal(hist, y, level):
                report.failures.append(f"#{idx}: level {level} is not maximal")
            if N <= MAX_D_GROUPS and hist.num_labels <= MAX_D_LABELS:
                report.oracle_checked += 1
                brute = oracle_max_m_d(hist, y)
                if brute != level:
                    report.failures.append(f"#{idx}: brute force gives {brute}, record says {level}")

        elif mode == "P":
            alpha_each = header["alpha"] / header["num_inputs"]
            top = max(hist.counts)
            lower = clopper_pearson_lower(top, N, alpha_each)
            if abs(lower - rec["p_lower"]) > CP_TOLERANCE:
                report.failures.append(f"#{idx}: p_lower {rec['p_lower']} != recomputed {lower}")
                continue
            bounds = ProbabilityBounds(rec["p_lower"], rec["p_upper"])
            if rec["label"] == "ABSTAIN":
                if bounds.lower_y > bounds.upper_z:
                    report.failures.append(f"#{idx}: abstained although bounds separate")
                continue
            if hist[rec["label"]] != top:
                report.failures.append(f"#{idx}: label {rec['label']} is not a plurality label")
            level = rec["level"]
            if level != certify_p_bounds(bounds, n, k):
                report.failures.append(f"#{idx}: level {level} != recomputed")
            lo, hi = quantize_bounds(bounds, n, k)
            if not p_level_is_maximal(lo - hi, n, k, level):
                report.failures.append(f"#{idx}: level {level} is not maximal")

        else:  # P-exact
            total = math.comb(n, k)
            y, level = rec["label"], rec["level"]
            runner_up = max(c for j, c in enumerate(hist.counts) if j != y)
            if hist[y] == runner_up:
                if level != 0:
                    report.failures.append(f"#{idx}: exact tie must certify level 0")
                continue
            gap = Fraction(hist[y] - runner_up, total)
            if level != certify_p_exact(Fraction(hist[y], total), Fraction(runner_up, total), n, k):
                report.failures.append(f"#{idx}: level {level} != recomputed")
            if not p_level_is_maximal(gap, n, k, level):
                report.failures.append(f"#{idx}: level {level} is not maximal")
    return report
