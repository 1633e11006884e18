"""Majority-vote ensemble prediction and per-input certificates."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .certify import (
    LabelHistogram,
    ProbabilityBounds,
    certify_d,
    certify_p_bounds,
    certify_p_exact,
    clopper_pearson_lower,
    tie_broken_argmax,
    worst_competitor,
)
from .errors import DomainError, PreconditionError
from .fl import Model, predict_many

ABSTAIN = None
ENSEMBLE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CertifiedPrediction:
    label: int | None
    level: int | None
    histogram: LabelHistogram
    bounds: ProbabilityBounds | None = None

    @property
    def abstained(self) -> bool:
        return self.label is ABSTAIN

    def to_record(self, index: int) -> dict:
        rec = {
            "index": index,
            "label": "ABSTAIN" if self.abstained else self.label,
            "level": "ABSTAIN" if self.level is None else self.level,
            "counts": list(self.histogram.counts),
        }
        if self.bounds is not None:
            rec["p_lower"] = float(self.bounds.lower_y)
            rec["p_upper"] = float(self.bounds.upper_z)
        return rec


def vote_counts(models: Sequence[Model], X: np.ndarray) -> np.ndarray:
    """``(len(X), L)`` matrix of per-label vote counts."""
    if not models:
        raise DomainError("an ensemble needs at least one model")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    L = models[0].num_classes
    counts = np.zeros((len(X), L), dtype=np.int64)
    rows = np.arange(len(X))
    for m in models:
        np.add.at(counts, (rows, predict_many(m, X)), 1)
    return counts


def label_histogram(models: Sequence[Model], x: np.ndarray) -> LabelHistogram:
    return LabelHistogram(vote_counts(models, np.asarray(x)[None, :])[0])


def majority_vote(hist: LabelHistogram, tie_rule: str = "smallest_index",
                  rng: np.random.Generator | None = None) -> tuple[int, int]:
    """Return ``(y, z)``: the vote winner and its strongest competitor.

    ``tie_rule`` is ``"smallest_index"`` or ``"random"`` (uniform among the
    tied labels, drawn from ``rng``).
    """
    counts = hist.counts
    if tie_rule == "smallest_index":
        y = tie_broken_argmax(counts)
    elif tie_rule == "random":
        if rng is None:
            raise DomainError("random tie-breaking needs a generator")
        top = max(counts)
        tied = [j for j, c in enumerate(counts) if c == top]
        y = tied[0] if len(tied) == 1 else int(tied[rng.integers(len(tied))])
    else:
        raise DomainError(f"unknown tie rule {tie_rule!r}")
    z, _ = worst_competitor(counts, y)
    return y, z


def predict_and_certify_d(models: Sequence[Model], X: np.ndarray) -> list[CertifiedPrediction]:
    out = []
    for row in vote_counts(models, X):
        hist = LabelHistogram(row)
        y, _ = majority_vote(hist)
        out.append(CertifiedPrediction(y, certify_d(hist, y), hist))
    return out


def predict_and_certify_p(models: Sequence[Model], X: np.ndarray, alpha: float, n: int, k: int,
                          seed: int = 0) -> list[CertifiedPrediction]:
    """Sampled-group certificates, simultaneously valid with probability ``1 - alpha``.

    The confidence budget is split evenly over the inputs.
    """
    counts = vote_counts(models, X)
    N = len(models)
    alpha_each = alpha / len(counts)
    rng = np.random.default_rng(seed)
    cache: dict[int, float] = {}
    out = []
    for row in counts:
        hist = LabelHistogram(row)
        y, _ = majority_vote(hist, "random", rng)
        top = hist[y]
        if top not in cache:
            cache[top] = clopper_pearson_lower(top, N, alpha_each)
        lower = cache[top]
        bounds = ProbabilityBounds(lower, 1.0 - lower)
        if bounds.lower_y > bounds.upper_z:
            out.append(CertifiedPrediction(y, certify_p_bounds(bounds, n, k), hist, bounds))
        else:
            out.append(CertifiedPrediction(ABSTAIN, ABSTAIN, hist, bounds))
    return out


def predict_and_certify_p_exact(models: Sequence[Model], X: np.ndarray, n: int, k: int,
                                seed: int = 0) -> list[CertifiedPrediction]:
    """Certificates from exact label probabilities when every ``k``-subset has a model."""
    total = math.comb(n, k)
    if len(models) != total:
        raise PreconditionError(f"exact mode needs all {total} subset models, got {len(models)}")
    rng = np.random.default_rng(seed)
    out = []
    for row in vote_counts(models, X):
        hist = LabelHistogram(row)
        y, _ = majority_vote(hist, "random", rng)
        runner_up = max(c for j, c in enumerate(hist.counts) if j != y)
        if hist[y] == runner_up:
            out.append(CertifiedPrediction(y, 0, hist))
        else:
            level = certify_p_exact(Fraction(hist[y], total), Fraction(runner_up, total), n, k)
            out.append(CertifiedPrediction(y, level, hist))
    return out


def plain_predictions(models: Sequence[Model], X: np.ndarray) -> np.ndarray:
    """Majority vote with smallest-index ties, no certification."""
    return np.argmax(vote_counts(models, X), axis=1)


# -- serialization ---------------------------------------------------------------

def dump_ensemble(models: Sequence[Model], path, *, header: dict) -> None:
    """Write a JSON ensemble file: header plus one weight block per model.

    Floats are written with ``repr`` precision and keys sorted, so equal
    ensembles produce byte-identical files.
    """
    if not models:
        raise DomainError("refusing to write an empty ensemble")
    doc = {
        "schema_version": ENSEMBLE_SCHEMA_VERSION,
        "num_classes": models[0].num_classes,
        "dim": models[0].dim,
        "N": len(models),
        "header": header,
        "models": [{"weights": m.weights.tolist(), "bias": m.bias.tolist()} for m in models],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_ensemble(path) -> tuple[list[Model], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != ENSEMBLE_SCHEMA_VERSION:
        raise DomainError(f"unsupported ensemble schema {doc.get('schema_version')!r}")
    models = [Model(np.array(b["weights"]), np.array(b["bias"])) for b in doc["models"]]
    if len(models) != doc["N"]:
        raise DomainError(f"header says N={doc['N']} but file holds {len(models)} models")
    for m in models:
        if (m.num_classes, m.dim) != (doc["num_classes"], doc["dim"]):
            raise DomainError("model shape disagrees with the ensemble header")
    return models, doc["header"]


def ensemble_digest(models: Sequence[Model]) -> str:
    h = hashlib.sha256()
    for m in models:
        h.update(m.weights.tobytes())
        h.update(m.bias.tobytes())
    return h.hexdigest()
