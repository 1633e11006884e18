"""Client-to-group assignment for both grouping schemes.

Deterministic grouping hashes each client's immutable user ID into one of
``N`` disjoint buckets. Probabilistic grouping draws ``N`` independent
``k``-subsets, or enumerates every ``k``-subset when that is affordable.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import CapacityError, DomainError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

DEFAULT_ENUMERATION_LIMIT = 10_000


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 encoding of ``text``."""
    h = FNV64_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class ClientRecord:
    user_id: str
    local_data: Any = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class GroupAssignment:
    """Groups of client indices (0-based) produced by one grouping scheme."""

    variant: str
    groups: tuple[tuple[int, ...], ...]
    n: int
    k: int | None = None

    def __post_init__(self):
        if self.variant not in ("P", "D"):
            raise DomainError(f"variant must be 'P' or 'D', got {self.variant!r}")
        if self.variant == "D":
            members = sorted(itertools.chain.from_iterable(self.groups))
            if members != list(range(self.n)):
                raise DomainError("D groups must partition all clients")
        else:
            for g in self.groups:
                if len(g) != self.k or len(set(g)) != self.k:
                    raise DomainError(f"P group {g} does not have {self.k} distinct members")

    @property
    def N(self) -> int:
        return len(self.groups)

    def memberships(self) -> np.ndarray:
        """Number of groups each client belongs to."""
        counts = np.zeros(self.n, dtype=np.int64)
        for g in self.groups:
            counts[list(g)] += 1
        return counts

    def groups_of(self, client: int) -> list[int]:
        return [i for i, g in enumerate(self.groups) if client in g]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "N": self.N,
            "n": self.n,
            "k": self.k,
            "groups": [list(g) for g in self.groups],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GroupAssignment":
        groups = tuple(tuple(int(i) for i in g) for g in d["groups"])
        if len(groups) != d["N"]:
            raise DomainError(f"header says N={d['N']} but {len(groups)} groups are listed")
        return cls(d["variant"], groups, int(d["n"]), d.get("k"))

    @classmethod
    def from_json(cls, text: str) -> "GroupAssignment":
        return cls.from_dict(json.loads(text))


def _user_id(client) -> str:
    return client.user_id if isinstance(client, ClientRecord) else str(client)


def hash_group(user_id: str, N: int) -> int:
    """Group number in ``1..N`` for a user ID."""
    return fnv1a_64(user_id) % N + 1


def assign_groups_d(clients: Sequence, N: int) -> GroupAssignment:
    """Disjoint groups keyed on the hash of each client's user ID.

    ``clients`` may hold :class:`ClientRecord` objects or bare user IDs.
    Groups can come out empty.
    """
    if N < 1:
        raise DomainError(f"N must be positive, got {N}")
    buckets: list[list[int]] = [[] for _ in range(N)]
    for idx, client in enumerate(clients):
        buckets[hash_group(_user_id(client), N) - 1].append(idx)
    return GroupAssignment("D", tuple(tuple(b) for b in buckets), len(clients))


def sample_groups_p(clients: Sequence, k: int, N: int, seed: int) -> GroupAssignment:
    """``N`` independent uniform ``k``-subsets of the clients (duplicates allowed)."""
    n = len(clients)
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    if N < 1:
        raise DomainError(f"N must be positive, got {N}")
    rng = np.random.default_rng(seed)
    groups = tuple(
        tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False))) for _ in range(N)
    )
    return GroupAssignment("P", groups, n, k)


def enumerate_all_groups(clients: Sequence, k: int, limit: int = DEFAULT_ENUMERATION_LIMIT) -> GroupAssignment:
    """Every ``k``-subset of the clients in lexicographic order."""
    n = len(clients)
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    total = math.comb(n, k)
    if total > limit:
        raise CapacityError(
            f"C({n},{k}) = {total} groups exceeds the limit of {limit}; "
            "sample N groups with sample_groups_p instead"
        )
    return GroupAssignment("P", tuple(itertools.combinations(range(n), k)), n, k)
