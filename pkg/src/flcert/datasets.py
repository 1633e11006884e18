"""Datasets: synthetic Gaussian blobs, CSV ingestion, non-IID partitioning, triggers."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, DomainError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise DomainError(f"features must be a matrix, got shape {X.shape}")
        if len(X) != len(y):
            raise DomainError(f"{len(X)} feature rows but {len(y)} labels")
        if self.num_classes < 2:
            raise DomainError("a dataset needs at least two classes")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(X)):
            raise DomainError("features contain non-finite values")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def with_arrays(self, features=None, labels=None) -> "Dataset":
        return Dataset(
            self.features if features is None else features,
            self.labels if labels is None else labels,
            self.num_classes,
        )


@dataclass(frozen=True)
class TriggerSpec:
    """Backdoor trigger: overwrite ``features[indices]`` with ``values``."""

    indices: tuple[int, ...]
    values: tuple[float, ...]
    target_label: int

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.indices) != len(self.values):
            raise DomainError("trigger indices and values differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise DomainError("trigger indices must be distinct")

    @classmethod
    def every_nth(cls, dim: int, step: int = 20, value: float = 0.0, target_label: int = 0) -> "TriggerSpec":
        """Set every ``step``-th feature (starting at 0) to ``value``."""
        idx = tuple(range(0, dim, step))
        return cls(idx, (value,) * len(idx), target_label)

    def validate(self, dim: int, num_classes: int | None = None) -> None:
        bad = [i for i in self.indices if not 0 <= i < dim]
        if bad:
            raise DomainError(f"trigger indices {bad} outside [0, {dim})")
        if num_classes is not None and not 0 <= self.target_label < num_classes:
            raise DomainError(f"target label {self.target_label} outside [0, {num_classes})")


def gen_synthetic(num_classes: int, dims: int, per_class: int, spread: float, seed: int,
                  scale: float = 2.0) -> Dataset:
    """Isotropic Gaussian blobs, one per class, centred on scaled coordinate axes.

    Class ``l`` is centred at ``scale * (-1)**(l // dims) * e_(l % dims)``, so up
    to ``2 * dims`` classes get distinct centres.
    """
    if num_classes < 2 or dims < 1 or per_class < 1:
        raise DomainError("need num_classes >= 2, dims >= 1, per_class >= 1")
    if spread <= 0:
        raise DomainError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, dims))
    for l in range(num_classes):
        means[l, l % dims] = scale * (-1.0) ** (l // dims)
    labels = np.repeat(np.arange(num_classes), per_class)
    X = means[labels] + spread * rng.standard_normal((len(labels), dims))
    return Dataset(X, labels, num_classes)


def partition_noniid(data: Dataset, n_clients: int, q: float, seed: int) -> list[Dataset]:
    """Split ``data`` over clients with degree of non-IID ``q``.

    Clients form ``L`` near-equal buckets. An example of label ``l`` goes to
    bucket ``l`` with probability ``q`` and to each other bucket with
    probability ``(1 - q) / (L - 1)``, then to a uniform client in that bucket.
    """
    L = data.num_classes
    if n_clients < L:
        raise DomainError(f"need at least {L} clients for {L} buckets, got {n_clients}")
    if not (1.0 / L - 1e-12 <= q <= 1.0):
        raise DomainError(f"q must lie in [1/{L}, 1], got {q}")
    rng = np.random.default_rng(seed)
    buckets = np.array_split(np.arange(n_clients), L)
    owner = np.empty(len(data), dtype=np.int64)
    other = (1.0 - q) / (L - 1)
    for i, label in enumerate(data.labels):
        probs = np.full(L, other)
        probs[label] = q
        b = rng.choice(L, p=probs / probs.sum())
        owner[i] = rng.choice(buckets[b])
    return [data.subset(np.flatnonzero(owner == c)) for c in range(n_clients)]


def load_csv(path) -> Dataset:
    """Read rows of ``d`` reals followed by an integer label.

    The number of classes is ``max(label) + 1`` (at least 2). Features are
    returned as read; see :func:`standardize`.
    """
    path = Path(path)
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DatasetError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if label < 0:
                raise DatasetError(f"{path}:{lineno}: negative label {label}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    try:
        return Dataset(np.array(rows), np.array(labels), max(2, max(labels) + 1))
    except DomainError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def standardize(data: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Zero-mean, unit-variance columns; constant columns are only centred.

    Returns ``(dataset, (mean, scale))`` so the same transform can be applied
    to a test set.
    """
    if stats is None:
        mean = data.features.mean(axis=0)
        scale = data.features.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        mean, scale = (np.asarray(s, dtype=np.float64) for s in stats)
    return data.with_arrays(features=(data.features - mean) / scale), (mean, scale)


def embed_trigger(x: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    spec.validate(x.shape[-1])
    if spec.indices:
        x[..., list(spec.indices)] = spec.values
    return x


def write_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def concat(datasets: Sequence[Dataset], num_classes: int) -> Dataset:
    nonempty = [d for d in datasets if len(d)]
    if not nonempty:
        raise DomainError("nothing to concatenate")
    return Dataset(
        np.concatenate([d.features for d in nonempty]),
        np.concatenate([d.labels for d in nonempty]),
        num_classes,
    )
