"""Poisoning attacks run by a fixed set of compromised clients.

Data poisoning rewrites the malicious clients' local datasets before
training. Model poisoning replaces the malicious clients' updates inside
each training round. The trim and Krum attacks are simplified stand-ins for
the full-knowledge optimisation attacks; results mark them as surrogates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .datasets import Dataset, TriggerSpec, embed_trigger
from .errors import ConfigError

DATA_POISON_KINDS = ("label_flip", "backdoor")
MODEL_POISON_KINDS = ("zero_update", "trim_attack", "krum_attack")
SURROGATE_KINDS = ("trim_attack", "krum_attack")

TRIM_OFFSET = 2.0


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    malicious_ids: frozenset
    trigger: TriggerSpec | None = None
    flip_rule: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in DATA_POISON_KINDS + MODEL_POISON_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "malicious_ids", frozenset(self.malicious_ids))
        if (self.trigger is not None) != (self.kind == "backdoor"):
            raise ConfigError("a trigger is required for, and only for, backdoor attacks")
        if (self.flip_rule is not None) != (self.kind == "label_flip"):
            raise ConfigError("a flip rule is required for, and only for, label_flip attacks")
        if self.flip_rule is not None:
            rule = tuple(int(v) for v in self.flip_rule)
            if sorted(rule) != list(range(len(rule))):
                raise ConfigError(f"flip rule {rule} is not a permutation")
            object.__setattr__(self, "flip_rule", rule)

    @property
    def is_model_poison(self) -> bool:
        return self.kind in MODEL_POISON_KINDS

    @property
    def is_data_poison(self) -> bool:
        return self.kind in DATA_POISON_KINDS

    @property
    def surrogate(self) -> bool:
        return self.kind in SURROGATE_KINDS


def shift_flip_rule(num_classes: int, shift: int = 1) -> tuple[int, ...]:
    """Label permutation ``l -> (l + shift) mod L``."""
    return tuple((l + shift) % num_classes for l in range(num_classes))


def apply_data_poison(spec: AttackSpec, client_datasets: Mapping[str, Dataset]) -> dict[str, Dataset]:
    """Poison the malicious clients' datasets; benign datasets are returned as is.

    ``client_datasets`` maps user ID to dataset.
    """
    if not spec.is_data_poison:
        raise ConfigError(f"{spec.kind} is not a data poisoning attack")
    missing = spec.malicious_ids - set(client_datasets)
    if missing:
        raise ConfigError(f"malicious clients not found: {sorted(missing)}")
    out = dict(client_datasets)
    for uid in sorted(spec.malicious_ids):
        data = client_datasets[uid]
        if spec.kind == "label_flip":
            if len(spec.flip_rule) != data.num_classes:
                raise ConfigError("flip rule does not cover every label")
            out[uid] = data.with_arrays(labels=np.asarray(spec.flip_rule)[data.labels])
        else:
            spec.trigger.validate(data.dim, data.num_classes)
            out[uid] = data.with_arrays(
                features=embed_trigger(data.features, spec.trigger),
                labels=np.full(len(data), spec.trigger.target_label),
            )
    return out


def craft_model_poison(spec: AttackSpec, malicious_benign: Sequence[np.ndarray],
                       benign: Sequence[np.ndarray], rule: str) -> list[np.ndarray]:
    """Updates submitted by the malicious clients selected this round.

    ``malicious_benign`` holds the updates those clients would have sent
    honestly; ``benign`` holds the genuine clients' updates, which the
    attacker is assumed to see in full.
    """
    if not spec.is_model_poison:
        raise ConfigError(f"{spec.kind} is not a model poisoning attack")
    count = len(malicious_benign)
    if count == 0:
        return []
    dim = malicious_benign[0].shape

    if spec.kind == "zero_update":
        if rule != "fedavg":
            raise ConfigError("zero_update targets FedAvg")
        if not benign:
            return [np.zeros(dim) for _ in range(count)]
        # Same left-to-right order as the FedAvg sum, so the mean is exactly zero.
        total = np.zeros(dim)
        for u in benign:
            total = total + u
        share = -total / count
        out = []
        for _ in range(count - 1):
            out.append(share.copy())
            total = total + share
        out.append(-total)
        return out

    reference = np.stack(list(benign) if benign else list(malicious_benign))
    mean = reference.mean(axis=0)

    if spec.kind == "trim_attack":
        if rule == "krum":
            raise ConfigError("trim_attack does not target Krum; use krum_attack")
        lo, hi = reference.min(axis=0), reference.max(axis=0)
        spread = np.where(hi > lo, hi - lo, np.abs(mean))
        spread = np.where(spread > 0, spread, 1.0)
        value = np.where(mean > 0, lo - TRIM_OFFSET * spread, hi + TRIM_OFFSET * spread)
        return [value.copy() for _ in range(count)]

    if rule != "krum":
        raise ConfigError("krum_attack targets Krum")
    # Colluders send one identical vector against the benign direction, so
    # they are each other's nearest neighbours at distance zero.
    return [-mean.copy() for _ in range(count)]
