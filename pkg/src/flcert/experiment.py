"""End-to-end experiments: data, grouping, training, certification, metrics, files."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .attacks import AttackSpec, apply_data_poison, shift_flip_rule
from .datasets import (
    Dataset,
    TriggerSpec,
    embed_trigger,
    gen_synthetic,
    load_csv,
    partition_noniid,
    standardize,
    write_csv,
)
from .ensemble import (
    CertifiedPrediction,
    dump_ensemble,
    ensemble_digest,
    plain_predictions,
    predict_and_certify_d,
    predict_and_certify_p,
    predict_and_certify_p_exact,
)
from .errors import ConfigError, DomainError, FLCertError
from .fl import Model, TrainConfig, train_global
from .grouping import (
    GroupAssignment,
    assign_groups_d,
    enumerate_all_groups,
    sample_groups_p,
)

log = logging.getLogger(__name__)

RESULT_SCHEMA_VERSION = 1
FLTRUST_SERVER_EXAMPLES = 100
ABSTAIN_NOTE = "ABSTAIN counts as incorrect in CA@m"

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "n_clients": 60,
    "variant": "D",
    "N": 15,
    "k": None,
    "alpha": 0.001,
    "p_exact": False,
    "noniid": 0.5,
    "m_grid": [0, 1, 2, 3, 4, 5, 6, 7],
    "output": "results/run",
    "dataset": {
        "kind": "synthetic",
        "num_classes": 3,
        "dims": 10,
        "per_class": 200,
        "test_per_class": 100,
        "spread": 0.5,
        "train_csv": None,
        "test_csv": None,
    },
    "train": {
        "global_iters": 50,
        "local_iters": 5,
        "learning_rate": 0.1,
        "batch_size": 32,
        "client_fraction": 1.0,
        "aggregation": "fedavg",
        "agg_params": {},
    },
    "attack": {
        "kind": None,
        "num_malicious": 0,
        "malicious_ids": [],
        "trigger_step": 20,
        "trigger_value": 0.0,
        "target_label": 0,
        "flip_shift": 1,
    },
}

# Fields that say where or how fast to run, not what to compute.
_NON_DIGEST_KEYS = ("output",)


# -- configuration ---------------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key != "agg_params":
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path + key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def flat_keys(cfg: dict = DEFAULT_CONFIG, prefix: str = "") -> list[str]:
    """Dotted names of every leaf field, e.g. ``train.learning_rate``."""
    keys = []
    for key, value in cfg.items():
        if isinstance(value, dict) and key != "agg_params":
            keys += flat_keys(value, f"{prefix}{key}.")
        else:
            keys.append(prefix + key)
    return keys


def set_dotted(cfg: dict, dotted: str, value) -> None:
    *sections, leaf = dotted.split(".")
    node = cfg
    for s in sections:
        node = node[s]
    if leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = value


def validate_config(cfg: dict) -> dict:
    if cfg["variant"] not in ("P", "D"):
        raise ConfigError(f"variant must be P or D, got {cfg['variant']!r}")
    if cfg["N"] is None or int(cfg["N"]) < 1:
        raise ConfigError("N must be a positive integer")
    if cfg["variant"] == "P":
        if cfg["k"] is None or cfg["alpha"] is None:
            raise ConfigError("variant P needs both k and alpha")
        if not 1 <= int(cfg["k"]) <= int(cfg["n_clients"]):
            raise ConfigError(f"k must lie in [1, n_clients], got {cfg['k']}")
        if not 0 < float(cfg["alpha"]) < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {cfg['alpha']}")
    grid = list(cfg["m_grid"])
    if grid != sorted(grid) or any(int(m) < 0 for m in grid):
        raise ConfigError("m_grid must be non-negative and sorted ascending")
    if cfg["dataset"]["kind"] not in ("synthetic", "csv"):
        raise ConfigError(f"unknown dataset kind {cfg['dataset']['kind']!r}")
    if cfg["dataset"]["kind"] == "csv" and not (cfg["dataset"]["train_csv"] and cfg["dataset"]["test_csv"]):
        raise ConfigError("csv datasets need train_csv and test_csv")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file, then dotted-key overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for dotted, value in (overrides or {}).items():
        set_dotted(cfg, dotted, value)
    return validate_config(cfg)


def config_digest(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of the config, minus output location."""
    body = {k: v for k, v in cfg.items() if k not in _NON_DIGEST_KEYS}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def derive_seed(master: int, stream: str) -> int:
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(key,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# -- metrics -----------------------------------------------------------------------

def certified_accuracy(certs: Sequence[CertifiedPrediction], true_labels: Sequence[int], m: int) -> float:
    if len(certs) != len(true_labels):
        raise DomainError(f"{len(certs)} certificates but {len(true_labels)} labels")
    if not certs:
        return 0.0
    hits = sum(
        1 for c, t in zip(certs, true_labels)
        if not c.abstained and c.label == int(t) and c.level >= m
    )
    return hits / len(certs)


def attack_success_rate(predictions: Sequence[int], target_label: int) -> float:
    predictions = np.asarray(predictions)
    if predictions.size == 0:
        raise DomainError("attack success rate needs at least one prediction")
    return float(np.mean(predictions == target_label))


def max_certified_m(certs: Sequence[CertifiedPrediction], true_labels: Sequence[int]) -> int:
    """Largest ``m`` with ``CA@m > 0``; -1 when nothing is certified correctly."""
    levels = [c.level for c, t in zip(certs, true_labels) if not c.abstained and c.label == int(t)]
    return max(levels, default=-1)


def cost_estimate(n: int, k: int | None, N: int, beta_e: float, T_e: float, variant: str) -> float:
    """Expected number of global iterations each client takes part in."""
    if variant == "P":
        if k is None:
            raise DomainError("variant P needs k")
        # Group-coverage factor first: it is exactly 1.0 when kN = n.
        return (k * N / n) * beta_e * T_e
    if variant == "D":
        return beta_e * T_e
    raise DomainError(f"unknown variant {variant!r}")


def parity_global_iters(beta: float, T: int, beta_e: float) -> Fraction:
    """Per-group iterations matching a single global model's client cost, ``beta*T/beta_e``."""
    return Fraction(str(beta)) * T / Fraction(str(beta_e))


# -- pipeline -----------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: dict
    config_digest: str
    groups: GroupAssignment
    models: list[Model]
    test_set: Dataset
    certificates: list[CertifiedPrediction]
    predictions: np.ndarray
    ca: dict[int, float]
    test_accuracy: float
    max_certified_m: int
    attack_success_rate: float | None
    cost: float
    malicious_ids: list[str]
    notes: list[str] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        cfg = self.config
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "config": cfg,
            "config_digest": self.config_digest,
            "variant": cfg["variant"],
            "n": cfg["n_clients"],
            "N": self.groups.N,
            "k": self.groups.k,
            "alpha": cfg["alpha"] if cfg["variant"] == "P" else None,
            "test_accuracy": self.test_accuracy,
            "certified_accuracy": [{"m": m, "ca": ca} for m, ca in sorted(self.ca.items())],
            "max_certified_m": self.max_certified_m,
            "attack_success_rate": self.attack_success_rate,
            "cost_per_client": self.cost,
            "malicious_ids": self.malicious_ids,
            "ensemble_digest": ensemble_digest(self.models),
            "notes": self.notes,
            "timing": self.timing,
        }


class StageError(FLCertError):
    """Failure inside one pipeline stage; the message is prefixed with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (FLCertError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def _build_data(cfg: dict):
    ds = cfg["dataset"]
    seed = cfg["seed"]
    if ds["kind"] == "synthetic":
        L, d, spread = int(ds["num_classes"]), int(ds["dims"]), float(ds["spread"])
        train = gen_synthetic(L, d, int(ds["per_class"]), spread, derive_seed(seed, "train-data"))
        test = gen_synthetic(L, d, int(ds["test_per_class"]), spread, derive_seed(seed, "test-data"))
        pool = gen_synthetic(L, d, math.ceil(FLTRUST_SERVER_EXAMPLES / L), spread,
                             derive_seed(seed, "server-data"))
        pick = np.random.default_rng(derive_seed(seed, "server-pick")).permutation(len(pool))
        server = pool.subset(np.sort(pick[:FLTRUST_SERVER_EXAMPLES]))
        return train, test, server, test
    raw_train = load_csv(ds["train_csv"])
    raw_test = load_csv(ds["test_csv"])
    L = max(raw_train.num_classes, raw_test.num_classes)
    raw_train = Dataset(raw_train.features, raw_train.labels, L)
    raw_test = Dataset(raw_test.features, raw_test.labels, L)
    if raw_train.dim != raw_test.dim:
        raise DomainError(f"train has {raw_train.dim} features but test has {raw_test.dim}")
    train, stats = standardize(raw_train)
    test, _ = standardize(raw_test, stats)
    rng = np.random.default_rng(derive_seed(seed, "server-pick"))
    take = min(FLTRUST_SERVER_EXAMPLES, len(train))
    server = train.subset(np.sort(rng.permutation(len(train))[:take]))
    return train, test, server, raw_test


def _standardization(cfg: dict):
    if cfg["dataset"]["kind"] != "csv":
        return None
    _, stats = standardize(load_csv(cfg["dataset"]["train_csv"]))
    return {"mean": stats[0].tolist(), "scale": stats[1].tolist()}


def _attack_spec(cfg: dict, user_ids: list[str], num_classes: int, dim: int) -> AttackSpec | None:
    a = cfg["attack"]
    if not a["kind"]:
        return None
    if a["malicious_ids"]:
        ids = [str(u) for u in a["malicious_ids"]]
    else:
        count = int(a["num_malicious"])
        if not 0 <= count <= len(user_ids):
            raise ConfigError(f"num_malicious must lie in [0, {len(user_ids)}]")
        rng = np.random.default_rng(derive_seed(cfg["seed"], "malicious"))
        ids = [user_ids[i] for i in sorted(rng.choice(len(user_ids), size=count, replace=False))]
    trigger = flip = None
    if a["kind"] == "backdoor":
        trigger = TriggerSpec.every_nth(dim, int(a["trigger_step"]), float(a["trigger_value"]),
                                        int(a["target_label"]))
        trigger.validate(dim, num_classes)
    elif a["kind"] == "label_flip":
        flip = shift_flip_rule(num_classes, int(a["flip_shift"]))
    return AttackSpec(a["kind"], frozenset(ids), trigger=trigger, flip_rule=flip)


def build_groups(cfg: dict, user_ids: list[str]) -> GroupAssignment:
    if cfg["variant"] == "D":
        return assign_groups_d(user_ids, int(cfg["N"]))
    k = int(cfg["k"])
    if cfg["p_exact"]:
        groups = enumerate_all_groups(user_ids, k)
        if groups.N != int(cfg["N"]):
            raise ConfigError(f"exact mode trains all C(n,k) = {groups.N} groups; set N accordingly")
        return groups
    return sample_groups_p(user_ids, k, int(cfg["N"]), derive_seed(cfg["seed"], "groups"))


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        global_iters=int(t["global_iters"]),
        local_iters=int(t["local_iters"]),
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        client_fraction=float(t["client_fraction"]),
        aggregation=t["aggregation"],
        agg_params=dict(t["agg_params"] or {}),
        seed=derive_seed(cfg["seed"], "training"),
    )


def train_ensemble(groups: GroupAssignment, client_data: Sequence[Dataset], tcfg: TrainConfig,
                   num_classes: int, dim: int, *, attack: AttackSpec | None = None,
                   malicious: frozenset = frozenset(), server_data: Dataset | None = None,
                   threads: int = 1) -> list[Model]:
    """Train every group's model; the result does not depend on ``threads``."""

    def job(i: int) -> Model:
        return train_global(groups.groups[i], client_data, tcfg, i, num_classes, dim,
                            attack=attack, malicious=malicious, server_data=server_data)

    if threads <= 1:
        return [job(i) for i in range(groups.N)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, range(groups.N)))


def run_experiment(cfg: dict, *, threads: int = 1, write: bool = True) -> ExperimentResult:
    """Run one configured experiment and, if ``write``, save its files under ``cfg['output']``."""
    cfg = validate_config(copy.deepcopy(cfg))
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    notes: list[str] = []

    with _stage("data"):
        train, test, server, raw_test = _build_data(cfg)
        L, d = train.num_classes, train.dim
        n = int(cfg["n_clients"])
        clients = partition_noniid(train, n, float(cfg["noniid"]), derive_seed(cfg["seed"], "partition"))
        user_ids = [f"client-{i:04d}" for i in range(n)]
    timing["data"] = time.perf_counter() - t0

    with _stage("attack"):
        attack = _attack_spec(cfg, user_ids, L, d)
        malicious_idx: frozenset = frozenset()
        if attack is not None:
            index_of = {u: i for i, u in enumerate(user_ids)}
            missing = attack.malicious_ids - set(index_of)
            if missing:
                raise ConfigError(f"malicious clients not found: {sorted(missing)}")
            malicious_idx = frozenset(index_of[u] for u in attack.malicious_ids)
            if attack.is_data_poison:
                poisoned = apply_data_poison(attack, dict(zip(user_ids, clients)))
                clients = [poisoned[u] for u in user_ids]
            if attack.surrogate:
                notes.append(f"{attack.kind} is a simplified surrogate of the full-knowledge attack")

    with _stage("grouping"):
        groups = build_groups(cfg, user_ids)

    with _stage("training"):
        t1 = time.perf_counter()
        tcfg = train_config(cfg)
        models = train_ensemble(groups, clients, tcfg, L, d, attack=attack, malicious=malicious_idx,
                                server_data=server, threads=threads)
        timing["training"] = time.perf_counter() - t1

    with _stage("certification"):
        t2 = time.perf_counter()
        tie_seed = derive_seed(cfg["seed"], "ties")
        if cfg["variant"] == "D":
            certs = predict_and_certify_d(models, test.features)
        elif cfg["p_exact"]:
            certs = predict_and_certify_p_exact(models, test.features, n, int(cfg["k"]), tie_seed)
        else:
            certs = predict_and_certify_p(models, test.features, float(cfg["alpha"]), n,
                                          int(cfg["k"]), tie_seed)
            notes.append(ABSTAIN_NOTE)
        timing["certification"] = time.perf_counter() - t2

    with _stage("metrics"):
        predictions = plain_predictions(models, test.features)
        ca = {int(m): certified_accuracy(certs, test.labels, int(m)) for m in cfg["m_grid"]}
        test_acc = float(np.mean(predictions == test.labels))
        asr = None
        if attack is not None and attack.kind == "backdoor":
            target = attack.trigger.target_label
            keep = test.labels != target
            triggered = embed_trigger(test.features[keep], attack.trigger)
            asr = attack_success_rate(plain_predictions(models, triggered), target)
        t = cfg["train"]
        cost = cost_estimate(n, groups.k, groups.N, float(t["client_fraction"]), int(t["global_iters"]),
                             cfg["variant"])

    timing["total"] = time.perf_counter() - t0
    result = ExperimentResult(
        config=cfg,
        config_digest=config_digest(cfg),
        groups=groups,
        models=models,
        test_set=test,
        certificates=certs,
        predictions=predictions,
        ca=ca,
        test_accuracy=test_acc,
        max_certified_m=max_certified_m(certs, test.labels),
        attack_success_rate=asr,
        cost=cost,
        malicious_ids=sorted(attack.malicious_ids) if attack else [],
        notes=notes,
        timing=timing,
    )
    if write:
        with _stage("output"):
            write_result(result, Path(cfg["output"]), raw_test=raw_test)
    return result


# -- files ---------------------------------------------------------------------------

def certificate_header(cfg: dict, groups: GroupAssignment, num_inputs: int) -> dict:
    mode = "D" if cfg["variant"] == "D" else ("P-exact" if cfg["p_exact"] else "P")
    return {
        "schema_version": RESULT_SCHEMA_VERSION,
        "mode": mode,
        "n": groups.n,
        "k": groups.k,
        "N": groups.N,
        "alpha": float(cfg["alpha"]) if mode == "P" else None,
        "num_inputs": num_inputs,
    }


def write_certificates(path, header: dict, certs: Sequence[CertifiedPrediction]) -> None:
    with Path(path).open("w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for i, c in enumerate(certs):
            fh.write(json.dumps(c.to_record(i), sort_keys=True) + "\n")


def read_certificates(path) -> tuple[dict, list[dict]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise DomainError(f"{path}: empty certificate file")
    first = json.loads(lines[0])
    if "header" not in first:
        raise DomainError(f"{path}: first line must be the header record")
    return first["header"], [json.loads(ln) for ln in lines[1:]]


def write_ca_curve(path, ca: dict[int, float]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "ca"])
        for m, v in sorted(ca.items()):
            w.writerow([m, repr(v)])


def write_result(result: ExperimentResult, out: Path, raw_test: Dataset | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "result.json").write_text(json.dumps(result.summary(), sort_keys=True, indent=2) + "\n")
    write_ca_curve(out / "ca_curve.csv", result.ca)
    header = certificate_header(cfg, result.groups, len(result.certificates))
    write_certificates(out / "certificates.jsonl", header, result.certificates)
    (out / "groups.json").write_text(result.groups.to_json() + "\n")
    ens_header = dict(header)
    ens_header.update(
        config_digest=result.config_digest,
        standardization=_standardization(cfg),
        tie_seed=derive_seed(cfg["seed"], "ties"),
    )
    dump_ensemble(result.models, out / "ensemble.json", header=ens_header)
    write_csv(raw_test if raw_test is not None else result.test_set, out / "testset.csv")
    log.info("wrote results to %s", out)
