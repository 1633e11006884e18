import json

import numpy as np
import pytest
import yaml

from flcert.certify import LabelHistogram
from flcert.cli import main
from flcert.datasets import gen_synthetic, write_csv
from flcert.ensemble import CertifiedPrediction
from flcert.errors import ConfigError, DomainError
from flcert.experiment import (
    DEFAULT_CONFIG,
    StageError,
    attack_success_rate,
    certified_accuracy,
    config_digest,
    cost_estimate,
    derive_seed,
    load_config,
    max_certified_m,
    parity_global_iters,
    read_certificates,
    run_experiment,
)

H = LabelHistogram([1, 0])


def cert(label, level):
    return CertifiedPrediction(label, level, H)


def test_certified_accuracy_examples():
    certs = [cert(0, 3), cert(1, 1), cert(None, None), cert(2, 0)]
    truth = [0, 1, 1, 0]
    assert certified_accuracy(certs, truth, 0) == 0.5
    assert certified_accuracy(certs, truth, 2) == 0.25
    assert certified_accuracy(certs, truth, 4) == 0.0
    assert certified_accuracy([cert(1, 2)] * 3, [1, 1, 1], 2) == 1.0
    assert max_certified_m(certs, truth) == 3
    with pytest.raises(DomainError):
        certified_accuracy(certs, truth[:2], 0)


def test_attack_success_rate():
    assert attack_success_rate([2, 2, 2], 2) == 1.0
    assert attack_success_rate([0, 1, 2, 2], 2) == 0.5
    with pytest.raises(DomainError):
        attack_success_rate([], 0)


def test_cost_examples():
    assert cost_estimate(1000, 2, 500, 1.0, 100, "P") == 100
    assert cost_estimate(1000, None, 7, 1.0, 100, "D") == 100
    assert cost_estimate(60, 4, 15, 0.5, 40, "P") == cost_estimate(60, None, 15, 0.5, 40, "D")
    assert parity_global_iters(0.1, 1000, 1.0) == 100


def test_config_layers(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"N": 5, "train": {"learning_rate": 0.05}}))
    cfg = load_config(path, {"train.global_iters": 7})
    assert (cfg["N"], cfg["train"]["learning_rate"], cfg["train"]["global_iters"]) == (5, 0.05, 7)
    assert cfg["train"]["local_iters"] == DEFAULT_CONFIG["train"]["local_iters"]


@pytest.mark.parametrize(
    "doc",
    [{"variant": "Q"}, {"variant": "P"}, {"m_grid": [3, 1]}, {"nonsense": 1}, {"train": 3},
     {"dataset": {"kind": "csv"}}],
)
def test_config_validation(tmp_path, doc):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_digest_ignores_output_only():
    cfg = load_config()
    assert config_digest(cfg) == config_digest(dict(cfg, output="elsewhere"))
    assert config_digest(cfg) != config_digest(dict(cfg, seed=1))


def test_derive_seed_streams():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert len({derive_seed(0, "a"), derive_seed(0, "b"), derive_seed(1, "a")}) == 3


def small_cfg(tmp_path, **over):
    cfg = load_config(overrides={"output": str(tmp_path / "out"), "train.global_iters": 20})
    for key, value in over.items():
        node = cfg
        *sections, leaf = key.split(".")
        for s in sections:
            node = node[s]
        node[leaf] = value
    return cfg


def test_default_run_quality(tmp_path):
    res = run_experiment(small_cfg(tmp_path), write=False)
    assert res.ca[0] >= 0.9
    assert any(res.ca[m] > 0 for m in res.ca if m >= 3)
    assert res.ca[0] == pytest.approx(res.test_accuracy)
    values = [res.ca[m] for m in sorted(res.ca)]
    assert values == sorted(values, reverse=True)


def test_run_is_reproducible(tmp_path):
    a = run_experiment(small_cfg(tmp_path / "a"))
    b = run_experiment(small_cfg(tmp_path / "b"), threads=3)
    for name in ("certificates.jsonl", "ensemble.json", "ca_curve.csv", "groups.json", "testset.csv"):
        assert (tmp_path / "a/out" / name).read_bytes() == (tmp_path / "b/out" / name).read_bytes()
    ra = json.loads((tmp_path / "a/out/result.json").read_text())
    rb = json.loads((tmp_path / "b/out/result.json").read_text())
    for r in (ra, rb):
        r.pop("timing")
        r["config"].pop("output")
    assert ra == rb
    assert ra["config_digest"] == a.config_digest == b.config_digest


def test_backdoor_run_reports_asr(tmp_path):
    res = run_experiment(small_cfg(tmp_path, **{"attack.kind": "backdoor", "attack.num_malicious": 2,
                                                "attack.trigger_step": 3}), write=False)
    assert 0.0 <= res.attack_success_rate <= 1.0
    assert len(res.malicious_ids) == 2


def test_surrogate_attack_is_noted(tmp_path):
    res = run_experiment(small_cfg(tmp_path, **{"attack.kind": "trim_attack", "attack.num_malicious": 2,
                                                "train.aggregation": "trimmed_mean",
                                                "train.agg_params": {"trim": 1}, "N": 3}), write=False)
    assert any("surrogate" in note for note in res.notes)


def test_stage_label_on_failure(tmp_path):
    cfg = small_cfg(tmp_path, **{"attack.kind": "label_flip", "attack.malicious_ids": ["client-9999"]})
    with pytest.raises(StageError, match=r"^\[attack\]"):
        run_experiment(cfg, write=False)


def test_p_run_notes_abstain_rule(tmp_path):
    res = run_experiment(small_cfg(tmp_path, variant="P", k=4, N=30), write=False)
    assert any("ABSTAIN" in note for note in res.notes)
    assert res.groups.N == 30 and res.groups.k == 4


# -- CLI ---------------------------------------------------------------------------

def test_cli_run_certify_verify(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--output", str(out), "--train-global-iters", "15", "--N", "9"]) == 0
    assert "CA@0" in capsys.readouterr().out
    assert (out / "ca_curve.csv").read_text().splitlines()[0] == "m,ca"
    assert main(["certify", str(out / "ensemble.json"), str(out / "testset.csv"),
                 "--out", str(tmp_path / "re.jsonl")]) == 0
    assert (tmp_path / "re.jsonl").read_bytes() == (out / "certificates.jsonl").read_bytes()
    assert main(["verify", str(out / "certificates.jsonl")]) == 0
    assert "OK" in capsys.readouterr().out


def test_cli_verify_detects_tampering(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--output", str(out), "--train-global-iters", "10", "--N", "7"]) == 0
    header, records = read_certificates(out / "certificates.jsonl")
    records[0]["level"] += 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(json.dumps(r) for r in [{"header": header}] + records) + "\n")
    assert main(["verify", str(bad)]) == 1
    assert "FAIL #0" in capsys.readouterr().out


def test_cli_p_modes_verify(tmp_path):
    p = tmp_path / "p"
    assert main(["run", "--output", str(p), "--variant", "P", "--k", "4", "--N", "40",
                 "--train-global-iters", "10", "--alpha", "0.05"]) == 0
    assert main(["verify", str(p / "certificates.jsonl")]) == 0
    assert main(["certify", str(p / "ensemble.json"), str(p / "testset.csv"), "--out", str(tmp_path / "re.jsonl")]) == 0
    assert (tmp_path / "re.jsonl").read_bytes() == (p / "certificates.jsonl").read_bytes()
    e = tmp_path / "e"
    assert main(["run", "--output", str(e), "--variant", "P", "--p-exact", "true", "--n-clients", "6",
                 "--k", "2", "--N", "15", "--train-global-iters", "10"]) == 0
    assert main(["verify", str(e / "certificates.jsonl")]) == 0


def test_cli_csv_dataset(tmp_path):
    write_csv(gen_synthetic(3, 4, 80, 0.5, seed=1), tmp_path / "train.csv")
    write_csv(gen_synthetic(3, 4, 20, 0.5, seed=2), tmp_path / "test.csv")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({
        "output": str(tmp_path / "out"), "n_clients": 12, "N": 4,
        "dataset": {"kind": "csv", "train_csv": str(tmp_path / "train.csv"), "test_csv": str(tmp_path / "test.csv")},
        "train": {"global_iters": 10},
    }))
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    assert main(["certify", str(out / "ensemble.json"), str(tmp_path / "test.csv"),
                 "--out", str(tmp_path / "re.jsonl")]) == 0
    assert (tmp_path / "re.jsonl").read_bytes() == (out / "certificates.jsonl").read_bytes()


def test_cli_cost(capsys):
    assert main(["cost", "--variant", "P", "--n", "1000", "--k", "2", "--N", "500", "--T-e", "100",
                 "--beta", "0.1", "--T", "1000"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["cost_per_client"] == 100 and doc["parity_T_e"] == 100


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["run", "--output", str(tmp_path), "--variant", "P"]) == 2
    assert "flcert run: error" in capsys.readouterr().err
    assert main(["verify", str(tmp_path / "missing.jsonl")]) == 2
