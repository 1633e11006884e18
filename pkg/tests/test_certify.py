import itertools
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flcert._beta import beta_ppf, betainc
from flcert.certify import (
    LabelHistogram,
    ProbabilityBounds,
    certify_d,
    certify_p_bounds,
    certify_p_exact,
    clopper_pearson_lower,
    survival_ratio,
)
from flcert.errors import DomainError, PreconditionError


def avoiding_fraction(n, k, m):
    """Enumerate k-subsets of n clients and count those avoiding clients 0..m-1."""
    subsets = list(itertools.combinations(range(n), k))
    return Fraction(sum(1 for s in subsets if min(s) >= m), len(subsets))


# -- survival ratio ----------------------------------------------------------------

def test_survival_ratio_examples():
    assert survival_ratio(5, 2, 0) == 1
    assert survival_ratio(5, 2, 1) == Fraction(3, 5)
    assert survival_ratio(5, 2, 3) == Fraction(1, 10)


@pytest.mark.parametrize("n", range(1, 9))
def test_survival_ratio_matches_enumeration(n):
    for k in range(1, n + 1):
        for m in range(n - k + 1):
            assert survival_ratio(n, k, m) == avoiding_fraction(n, k, m)


def test_survival_ratio_strictly_decreasing():
    for n in range(2, 15):
        for k in range(1, n):
            ratios = [survival_ratio(n, k, m) for m in range(n - k + 1)]
            assert ratios[0] == 1
            assert all(a > b for a, b in zip(ratios, ratios[1:]))


@pytest.mark.parametrize("args", [(5, 2, 4), (5, 2, -1), (5, 6, 0), (5, 0, 0)])
def test_survival_ratio_domain(args):
    with pytest.raises(DomainError):
        survival_ratio(*args)


# -- exact and bound-based levels for random grouping ----------------------------------

def test_certify_p_exact_examples():
    assert certify_p_exact(Fraction(1), Fraction(0), 5, 2) == 1
    assert certify_p_exact(Fraction(9, 10), Fraction(1, 10), 5, 2) == 0


def test_certify_p_exact_rejects_non_dominant_and_off_grid():
    with pytest.raises(PreconditionError):
        certify_p_exact(Fraction(1, 2), Fraction(1, 2), 5, 2)
    with pytest.raises(DomainError):
        certify_p_exact(Fraction(1, 3), Fraction(0), 5, 2)


def test_certify_p_bounds_examples():
    assert certify_p_bounds(ProbabilityBounds(0.95, 0.05), 5, 2) == 1
    assert certify_p_bounds(ProbabilityBounds(0.55, 0.45), 5, 2) == 0


def test_certify_p_bounds_requires_separation():
    with pytest.raises(PreconditionError):
        certify_p_bounds(ProbabilityBounds(0.4, 0.4), 5, 2)


def test_quantization_boundary_is_exact():
    # Neither 0.6 nor 0.2 is an exact binary fraction; ceil/floor must still land
    # on 6/10 and 2/10. Gap 0.4 vs 2 - 2*(6/10) = 0.8 at m=1.
    assert certify_p_bounds(ProbabilityBounds(0.6, 0.2), 5, 2) == 0
    # Gap 1 - 0 beats 0.8 at m=1 but not 1.4 at m=2.
    assert certify_p_bounds(ProbabilityBounds(1.0, 0.0), 5, 2) == 1


@pytest.mark.parametrize("n", range(2, 9))
def test_exact_equals_bounds_on_grid(n):
    for k in range(1, min(3, n) + 1):
        total = math.comb(n, k)
        for a in range(total + 1):
            for b in range(a):
                p_y, p_z = Fraction(a, total), Fraction(b, total)
                bounds = ProbabilityBounds(p_y, p_z)
                assert certify_p_exact(p_y, p_z, n, k) == certify_p_bounds(bounds, n, k), (n, k, a, b)


def brute_level(lower, upper, n, k):
    """Largest m satisfying the quantized inequality, by direct search over all m."""
    total = math.comb(n, k)
    lo = Fraction(math.ceil(Fraction(lower) * total), total)
    hi = Fraction(math.floor(Fraction(upper) * total), total)
    ok = [m for m in range(n - k + 1) if lo - hi > 2 - 2 * Fraction(math.comb(n - m, k), total)]
    return max(ok)


@settings(max_examples=300, deadline=None)
@given(
    st.integers(2, 40),
    st.integers(1, 5),
    st.floats(0, 1, allow_nan=False),
    st.floats(0, 1, allow_nan=False),
)
def test_bounds_level_maximal_and_matches_search(n, k, a, b):
    k = min(k, n)
    lower, upper = max(a, b), min(a, b)
    if lower <= upper:
        return
    level = certify_p_bounds(ProbabilityBounds(lower, upper), n, k)
    assert level == brute_level(lower, upper, n, k)


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 30), st.integers(1, 4), st.floats(0.5, 1), st.floats(0, 0.5), st.floats(0, 0.2))
def test_bounds_level_monotone(n, k, lower, upper, eps):
    k = min(k, n)
    if lower <= upper:
        return
    base = certify_p_bounds(ProbabilityBounds(lower, upper), n, k)
    assert certify_p_bounds(ProbabilityBounds(min(1.0, lower + eps), upper), n, k) >= base
    assert certify_p_bounds(ProbabilityBounds(lower, max(0.0, upper - eps)), n, k) >= base


# -- Clopper-Pearson -------------------------------------------------------------------

def test_clopper_pearson_examples():
    assert clopper_pearson_lower(1, 1, 0.05) == pytest.approx(0.05, abs=1e-12)
    assert clopper_pearson_lower(100, 100, 0.001) == pytest.approx(0.93325, abs=1e-5)
    assert clopper_pearson_lower(0, 50, 0.05) == 0.0


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_clopper_pearson_alpha_domain(alpha):
    with pytest.raises(DomainError):
        clopper_pearson_lower(3, 10, alpha)


def test_clopper_pearson_rejects_bad_counts():
    with pytest.raises(DomainError):
        clopper_pearson_lower(11, 10, 0.05)
    with pytest.raises(DomainError):
        clopper_pearson_lower(1, 0, 0.05)


@pytest.mark.parametrize("trials", [1, 7, 20, 100, 500])
@pytest.mark.parametrize("alpha", [0.05, 0.001, 1e-6])
def test_clopper_pearson_matches_scipy(trials, alpha):
    for s in sorted({1, trials // 3 or 1, trials // 2 or 1, trials - 1 or 1, trials}):
        expected = stats.beta.ppf(alpha, s, trials - s + 1)
        assert clopper_pearson_lower(s, trials, alpha) == pytest.approx(expected, abs=1e-10)


def test_clopper_pearson_monotone():
    for N in (10, 57):
        lows = [clopper_pearson_lower(s, N, 0.01) for s in range(N + 1)]
        assert all(a <= b for a, b in zip(lows, lows[1:]))
        for s in (1, N // 2, N):
            by_alpha = [clopper_pearson_lower(s, N, a) for a in (0.2, 0.05, 0.01, 0.001)]
            assert all(a >= b for a, b in zip(by_alpha, by_alpha[1:]))


@pytest.mark.parametrize("a,b", [(0.5, 0.5), (1, 1), (2, 5), (55, 46), (500, 1), (3, 300), (120, 80)])
def test_betainc_matches_scipy(a, b):
    from scipy import special

    for x in (1e-6, 0.01, 0.2, 0.5, 0.77, 0.99, 0.999999):
        assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-12)


def test_beta_ppf_inverts_betainc():
    for a, b, q in [(3, 4, 0.3), (50, 2, 0.001), (1, 1, 0.7)]:
        assert betainc(a, b, beta_ppf(q, a, b)) == pytest.approx(q, abs=1e-10)


# -- disjoint grouping ---------------------------------------------------------------

@pytest.mark.parametrize(
    "counts,y,level",
    [([7, 3, 2], 0, 2), ([5, 5], 0, 0), ([4, 6], 1, 0), ([11, 0], 0, 5), ([0, 0, 9], 2, 4)],
)
def test_certify_d_examples(counts, y, level):
    assert certify_d(LabelHistogram(counts), y) == level


def test_certify_d_rejects_non_majority():
    with pytest.raises(PreconditionError):
        certify_d(LabelHistogram([5, 5]), 1)
    with pytest.raises(PreconditionError):
        certify_d(LabelHistogram([2, 7]), 0)


def z_form(counts, y):
    """Level computed by picking the runner-up first (smallest index among ties)."""
    others = [j for j in range(len(counts)) if j != y]
    z = max(others, key=lambda j: (counts[j], -j))
    return (counts[y] - (counts[z] + (1 if z < y else 0))) // 2


@settings(max_examples=500)
@given(st.lists(st.integers(0, 30), min_size=2, max_size=6).filter(lambda c: sum(c) > 0))
def test_certify_d_max_form_equals_z_form_and_is_bounded(counts):
    hist = LabelHistogram(counts)
    y = max(range(len(counts)), key=lambda j: (counts[j], -j))
    level = certify_d(hist, y)
    assert level == max(0, z_form(counts, y))
    assert 0 <= level <= hist.total // 2


def test_histogram_validation():
    with pytest.raises(DomainError):
        LabelHistogram([3])
    with pytest.raises(DomainError):
        LabelHistogram([1, -1])
    assert LabelHistogram([2, 3, 0]).total == 5
