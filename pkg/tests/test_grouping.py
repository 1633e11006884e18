import math
import random

import numpy as np
import pytest

from flcert.errors import CapacityError, DomainError
from flcert.grouping import (
    ClientRecord,
    GroupAssignment,
    assign_groups_d,
    enumerate_all_groups,
    fnv1a_64,
    hash_group,
    sample_groups_p,
)

IDS = [f"client-{i:04d}" for i in range(200)]


def reference_fnv1a(text):
    # Straight from the published definition: offset basis, xor byte, multiply by prime mod 2^64.
    h = 14695981039346656037
    for b in bytearray(text, "utf-8"):
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


@pytest.mark.parametrize(
    "text,expected",
    [("", 0xCBF29CE484222325), ("a", 0xAF63DC4C8601EC8C), ("foobar", 0x85944171F73967E8)],
)
def test_fnv1a_published_vectors(text, expected):
    assert fnv1a_64(text) == expected


def test_fnv1a_matches_reference_on_ids():
    for uid in IDS[:50] + ["ünïcode-id", "client-0042"]:
        assert fnv1a_64(uid) == reference_fnv1a(uid)


def test_hash_group_for_known_id():
    assert hash_group("client-0042", 500) == reference_fnv1a("client-0042") % 500 + 1


def test_d_single_bucket():
    a = assign_groups_d(IDS[:10], 1)
    assert a.groups == (tuple(range(10)),)


def test_d_deterministic_partition():
    a = assign_groups_d(IDS, 7)
    assert a == assign_groups_d(IDS, 7)
    assert sum(len(g) for g in a.groups) == len(IDS)
    assert sorted(i for g in a.groups for i in g) == list(range(len(IDS)))


def test_d_membership_independent_of_registration_order():
    shuffled = IDS[:]
    random.Random(3).shuffle(shuffled)
    a = assign_groups_d(IDS, 11)
    b = assign_groups_d(shuffled, 11)
    group_of_a = {IDS[i]: g for g, members in enumerate(a.groups) for i in members}
    group_of_b = {shuffled[i]: g for g, members in enumerate(b.groups) for i in members}
    assert group_of_a == group_of_b


def test_d_accepts_client_records_and_allows_empty_groups():
    a = assign_groups_d([ClientRecord("x")], 5)
    assert a.N == 5
    assert sum(1 for g in a.groups if not g) == 4


def test_p_full_groups_when_k_equals_n():
    a = sample_groups_p(IDS[:5], 5, 3, seed=11)
    assert a.groups == ((0, 1, 2, 3, 4),) * 3


def test_p_seed_contract():
    a = sample_groups_p(IDS, 4, 30, seed=1)
    assert a == sample_groups_p(IDS, 4, 30, seed=1)
    assert a != sample_groups_p(IDS, 4, 30, seed=2)
    assert all(len(set(g)) == 4 for g in a.groups)


def test_p_rejects_k_above_n():
    with pytest.raises(DomainError):
        sample_groups_p(IDS[:3], 4, 2, seed=0)


def test_p_mean_membership():
    clients = [f"c{i}" for i in range(1000)]
    means = [sample_groups_p(clients, 2, 500, seed=s).memberships().mean() for s in range(100)]
    # Each draw places exactly k*N memberships, so the mean is exactly kN/n.
    assert np.mean(means) == pytest.approx(2 * 500 / 1000, abs=1e-12)
    counts = np.concatenate([sample_groups_p(clients, 2, 500, seed=s).memberships() for s in range(20)])
    # Per-client membership is Binomial(500, 2/1000): variance about 0.998.
    assert counts.var() == pytest.approx(500 * 0.002 * 0.998, rel=0.1)


def test_enumerate_all_groups():
    a = enumerate_all_groups(IDS[:5], 2)
    assert a.N == 10
    assert len(set(a.groups)) == 10
    assert list(a.groups) == sorted(a.groups)
    assert set(a.memberships()) == {math.comb(4, 1)}
    assert enumerate_all_groups(IDS[:4], 4).N == 1


def test_enumerate_capacity():
    with pytest.raises(CapacityError, match="sample"):
        enumerate_all_groups(IDS[:30], 5)


def test_assignment_json_roundtrip():
    for a in (assign_groups_d(IDS[:20], 4), sample_groups_p(IDS[:20], 3, 6, seed=0)):
        assert GroupAssignment.from_json(a.to_json()) == a


def test_assignment_invariants_enforced():
    with pytest.raises(DomainError):
        GroupAssignment("D", ((0, 1), (1, 2)), 3)
    with pytest.raises(DomainError):
        GroupAssignment("P", ((0, 0),), 3, 2)
