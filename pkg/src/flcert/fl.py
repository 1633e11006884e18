"""Determinized federated training of linear softmax classifiers.

Each group's global model is trained from zero with its own randomness
stream, derived from ``(seed, group_index)``. Training a group therefore
depends only on that group's clients and never on scheduling or on other
groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datasets import Dataset
from .errors import ConfigError, DomainError

AGGREGATION_RULES = ("fedavg", "krum", "trimmed_mean", "median", "fltrust")


@dataclass(frozen=True)
class Model:
    weights: np.ndarray  # (L, d)
    bias: np.ndarray  # (L,)

    def __post_init__(self):
        W = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DomainError(f"inconsistent shapes {W.shape} and {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DomainError("model parameters must be finite")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "Model":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, theta: np.ndarray, num_classes: int, dim: int) -> "Model":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (num_classes * dim + num_classes,):
            raise DomainError(f"parameter vector has shape {theta.shape}")
        return cls(theta[: num_classes * dim].reshape(num_classes, dim), theta[num_classes * dim:])

    def apply(self, delta: np.ndarray) -> "Model":
        return Model.from_flat(self.flat() + delta, self.num_classes, self.dim)


@dataclass(frozen=True)
class TrainConfig:
    global_iters: int = 50
    local_iters: int = 5
    learning_rate: float = 0.1
    batch_size: int = 32
    client_fraction: float = 1.0
    aggregation: str = "fedavg"
    agg_params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.global_iters < 1 or self.local_iters < 1 or self.batch_size < 1:
            raise ConfigError("global_iters, local_iters and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must lie in (0, 1], got {self.client_fraction}")
        if self.aggregation not in AGGREGATION_RULES:
            raise ConfigError(f"unknown aggregation rule {self.aggregation!r}")


def group_stream(seed: int, group_index: int) -> np.random.Generator:
    """Counter-based generator for one group, independent of every other group."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(group_index),))
    return np.random.Generator(np.random.Philox(ss))


def loss_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, num_classes: int):
    """Mean softmax cross-entropy and its gradient w.r.t. the flat parameters."""
    d = X.shape[1]
    W = theta[: num_classes * d].reshape(num_classes, d)
    b = theta[num_classes * d:]
    logits = X @ W.T + b
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    n = len(y)
    loss = -np.mean(np.log(probs[np.arange(n), y]))
    err = probs
    err[np.arange(n), y] -= 1.0
    err /= n
    return loss, np.concatenate([(err.T @ X).ravel(), err.sum(axis=0)])


def local_update(model: Model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Run ``cfg.local_iters`` minibatch SGD steps and return the parameter change."""
    theta0 = model.flat()
    if len(data) == 0:
        return np.zeros_like(theta0)
    theta = theta0.copy()
    batch = min(cfg.batch_size, len(data))
    for _ in range(cfg.local_iters):
        idx = rng.choice(len(data), size=batch, replace=False)
        _, g = loss_and_grad(theta, data.features[idx], data.labels[idx], model.num_classes)
        theta -= cfg.learning_rate * g
    return theta - theta0


def _ordered_sum(updates: Sequence[np.ndarray]) -> np.ndarray:
    # Left-to-right accumulation; attacks rely on this exact order.
    total = np.zeros_like(updates[0])
    for u in updates:
        total = total + u
    return total


def aggregate(rule: str, updates: Sequence[np.ndarray], **params) -> np.ndarray:
    """Combine client updates with one of the supported aggregation rules.

    ``krum`` takes ``f`` (assumed number of Byzantine inputs), ``trimmed_mean``
    takes ``trim`` (values dropped from each end per coordinate) and
    ``fltrust`` takes ``server_update``.
    """
    if not updates:
        raise DomainError("nothing to aggregate")
    U = [np.asarray(u, dtype=np.float64) for u in updates]
    if any(u.shape != U[0].shape for u in U):
        raise DomainError("updates differ in dimension")
    count = len(U)

    if rule == "fedavg":
        return _ordered_sum(U) / count

    if rule == "median":
        return np.median(np.stack(U), axis=0)

    if rule == "trimmed_mean":
        trim = int(params.get("trim", 0))
        if count <= 2 * trim:
            raise DomainError(f"trimmed mean with trim={trim} needs more than {2 * trim} updates")
        S = np.sort(np.stack(U), axis=0)
        return S[trim: count - trim].mean(axis=0)

    if rule == "krum":
        f = int(params.get("f", 0))
        if count < f + 3:
            raise DomainError(f"Krum with f={f} needs at least {f + 3} updates, got {count}")
        S = np.stack(U)
        sq = np.sum((S[:, None, :] - S[None, :, :]) ** 2, axis=2)
        neighbours = count - f - 2
        scores = [np.sort(np.delete(sq[i], i))[:neighbours].sum() for i in range(count)]
        return U[int(np.argmin(scores))].copy()

    if rule == "fltrust":
        s = params.get("server_update")
        if s is None:
            raise ConfigError("FLTrust needs a server_update")
        s = np.asarray(s, dtype=np.float64)
        if s.shape != U[0].shape:
            raise DomainError("server update differs in dimension")
        s_norm = np.linalg.norm(s)
        total = np.zeros_like(s)
        trust_sum = 0.0
        for u in U:
            u_norm = np.linalg.norm(u)
            if u_norm == 0 or s_norm == 0:
                continue
            ts = max(0.0, float(u @ s) / (u_norm * s_norm))
            if ts > 0:
                total += ts * (s_norm / u_norm) * u
                trust_sum += ts
        return total / trust_sum if trust_sum > 0 else np.zeros_like(s)

    raise ConfigError(f"unknown aggregation rule {rule!r}")


def _agg_params(cfg: TrainConfig) -> dict:
    params = dict(cfg.agg_params)
    if "f" in params:
        params["f"] = int(params["f"])
    if "trim" in params:
        params["trim"] = int(params["trim"])
    return params


def train_global(group: Sequence[int], client_data: Sequence[Dataset], cfg: TrainConfig,
                 group_index: int, num_classes: int, dim: int, *, attack=None,
                 malicious: frozenset = frozenset(), server_data: Dataset | None = None) -> Model:
    """Train one group's global model.

    ``group`` lists client indices into ``client_data``. When ``attack`` is a
    model-poisoning :class:`~flcert.attacks.AttackSpec`, the clients of this
    group listed in ``malicious`` replace their updates with crafted ones.
    """
    model = Model.zeros(num_classes, dim)
    members = sorted(group)
    if not members:
        return model
    if cfg.aggregation == "fltrust" and server_data is None:
        raise ConfigError("FLTrust needs a server dataset")
    rng = group_stream(cfg.seed, group_index)
    per_round = math.ceil(cfg.client_fraction * len(members))
    params = _agg_params(cfg)
    poisoning = attack is not None and attack.is_model_poison
    for _ in range(cfg.global_iters):
        if per_round == len(members):
            selected = members
        else:
            picks = rng.choice(len(members), size=per_round, replace=False)
            selected = sorted(members[i] for i in picks)
        updates = {c: local_update(model, client_data[c], cfg, rng) for c in selected}
        if cfg.aggregation == "fltrust":
            params["server_update"] = local_update(model, server_data, cfg, rng)
        bad = [c for c in selected if c in malicious] if poisoning else []
        good = [c for c in selected if c not in bad]
        submitted = [updates[c] for c in good]
        if bad:
            from .attacks import craft_model_poison

            submitted += craft_model_poison(
                attack, [updates[c] for c in bad], [updates[c] for c in good], cfg.aggregation
            )
        model = model.apply(aggregate(cfg.aggregation, submitted, **params))
    return model


def predict(model: Model, x: np.ndarray) -> int:
    """Argmax label; the smallest index wins ties."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise DomainError(f"input has shape {x.shape}, model expects ({model.dim},)")
    return int(predict_many(model, x[None, :])[0])


def predict_many(model: Model, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise DomainError(f"inputs have shape {X.shape}, model expects (*, {model.dim})")
    return np.argmax(X @ model.weights.T + model.bias, axis=1)


def accuracy(model: Model, data: Dataset) -> float:
    return float(np.mean(predict_many(model, data.features) == data.labels))
