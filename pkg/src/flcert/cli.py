"""Command line entry point: ``flcert run|certify|verify|cost``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .datasets import load_csv, standardize
from .ensemble import (
    load_ensemble,
    predict_and_certify_d,
    predict_and_certify_p,
    predict_and_certify_p_exact,
)
from .errors import FLCertError
from .experiment import (
    flat_keys,
    load_config,
    parity_global_iters,
    cost_estimate,
    read_certificates,
    run_experiment,
    write_certificates,
)
from .verify import verify_records

log = logging.getLogger("flcert")


def _flag(dotted: str) -> str:
    return "--" + dotted.replace(".", "-").replace("_", "-")


def _add_run(sub) -> None:
    p = sub.add_parser("run", help="run an experiment from a YAML config")
    p.add_argument("config", nargs="?", help="YAML config file (defaults apply when omitted)")
    p.add_argument("--threads", type=int, default=1, help="training threads (results do not depend on it)")
    group = p.add_argument_group("config overrides (YAML values)")
    for dotted in flat_keys():
        group.add_argument(_flag(dotted), dest="set:" + dotted, metavar="VALUE", default=None)


def _cmd_run(args) -> int:
    overrides = {
        key[4:]: yaml.safe_load(value)
        for key, value in vars(args).items()
        if key.startswith("set:") and value is not None
    }
    cfg = load_config(args.config, overrides)
    result = run_experiment(cfg, threads=args.threads)
    ca = ", ".join(f"CA@{m}={v:.3f}" for m, v in sorted(result.ca.items()))
    print(f"test accuracy {result.test_accuracy:.3f}; {ca}")
    if result.attack_success_rate is not None:
        print(f"attack success rate {result.attack_success_rate:.3f}")
    print(f"results written to {cfg['output']}")
    return 0


def _cmd_certify(args) -> int:
    models, header = load_ensemble(args.ensemble)
    test = load_csv(args.testset)
    if test.dim != models[0].dim:
        raise FLCertError(f"test set has {test.dim} features, ensemble expects {models[0].dim}")
    if header.get("standardization"):
        s = header["standardization"]
        test, _ = standardize(test, (np.array(s["mean"]), np.array(s["scale"])))
    mode = header["mode"]
    seed = header.get("tie_seed", 0) if args.seed is None else args.seed
    if mode == "D":
        certs = predict_and_certify_d(models, test.features)
    elif mode == "P-exact":
        certs = predict_and_certify_p_exact(models, test.features, header["n"], header["k"], seed)
    else:
        alpha = header["alpha"] if args.alpha is None else args.alpha
        header = dict(header, alpha=alpha)
        certs = predict_and_certify_p(models, test.features, alpha, header["n"], header["k"], seed)
    out_header = {k: header[k] for k in ("schema_version", "mode", "n", "k", "N", "alpha")}
    out_header["num_inputs"] = len(certs)
    write_certificates(args.out, out_header, certs)
    abstained = sum(c.abstained for c in certs)
    print(f"certified {len(certs)} inputs ({abstained} abstained) -> {args.out}")
    return 0


def _cmd_verify(args) -> int:
    header, records = read_certificates(args.certs)
    report = verify_records(header, records, args.limit)
    print(f"checked {report.checked} certificates ({report.oracle_checked} by brute force)")
    for line in report.failures:
        print("FAIL " + line)
    print("OK" if report.ok else f"{len(report.failures)} failures")
    return 0 if report.ok else 1


def _cmd_cost(args) -> int:
    cost = cost_estimate(args.n, args.k, args.N, args.beta_e, args.T_e, args.variant)
    doc = {"variant": args.variant, "cost_per_client": cost}
    if args.beta is not None and args.T is not None:
        doc["single_model_cost"] = args.beta * args.T
        doc["parity_T_e"] = float(parity_global_iters(args.beta, args.T, args.beta_e))
    print(json.dumps(doc, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flcert", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)

    p = sub.add_parser("certify", help="certify a test CSV with a saved ensemble")
    p.add_argument("ensemble")
    p.add_argument("testset")
    p.add_argument("--out", default="certificates.jsonl")
    p.add_argument("--alpha", type=float, default=None, help="override the ensemble's alpha (P only)")
    p.add_argument("--seed", type=int, default=None, help="tie-breaking seed (P only)")

    p = sub.add_parser("verify", help="re-check a certificate file, with brute force where small")
    p.add_argument("certs")
    p.add_argument("--limit", type=int, default=None, help="check only the first LIMIT records")

    p = sub.add_parser("cost", help="expected global iterations per client")
    p.add_argument("--variant", choices=("P", "D"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--beta-e", type=float, default=1.0)
    p.add_argument("--T-e", type=int, required=True)
    p.add_argument("--beta", type=float, default=None, help="single-model client fraction")
    p.add_argument("--T", type=int, default=None, help="single-model global iterations")
    return parser


COMMANDS = {"run": _cmd_run, "certify": _cmd_certify, "verify": _cmd_verify, "cost": _cmd_cost}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FLCertError, OSError, ValueError) as exc:
        print(f"flcert {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
