"""Command line entry points.

Subcommands: ``generate`` writes a synthetic clinical CSV plus its sidecar,
``run`` executes an experiment from a JSON config, ``attack`` runs the
adversary study (linkage plus extraction), and ``report`` re-pivots an
existing results.csv.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackTable, attribute_attack
from .core import RngStream
from .harness import (INPUT_METHODS, ExperimentConfig, ToyGenerator, condition_means,
                      emit_report, generate_toy, load_config, perturb_queries,
                      repivot, rows_from_csv, run_experiment)


def _cmd_generate(args) -> int:
    gen = ToyGenerator(dim=args.dim, qia_dims=args.qia_dims, train_size=args.size,
                       test_size=1, noise_sigma=args.noise_sigma, seed=args.seed)
    data = generate_toy(gen)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    names = [f"x{i}" for i in range(args.dim)]
    with open(out, "w", encoding="utf8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + ["y"])
        for row, y in zip(data.train_inputs, data.train_outputs):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])
    sidecar = out.with_suffix(out.suffix + ".sidecar.json")
    columns = [{"name": n, "role": "qia" if i < args.qia_dims else "ca", "kind": "numeric"}
               for i, n in enumerate(names)]
    columns.append({"name": "y", "role": "output", "kind": "numeric"})
    with open(sidecar, "w", encoding="utf8") as fh:
        json.dump({"columns": columns}, fh, indent=2)
        fh.write("\n")
    print(f"wrote {args.size} rows to {out}")
    print(f"wrote column declarations to {sidecar}")
    return 0


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if args.threads is not None:
        overrides["threads"] = args.threads
    return replace(config, **overrides) if overrides else config


def _print_headline(report) -> None:
    rows = [dict(r) for r in report.rows]
    ae = condition_means(rows, "ae")
    co = condition_means(rows, "co_percent")
    rl = condition_means(rows, "rl_percent")
    attack = condition_means(rows, "attack_ae")
    for cond in dict.fromkeys(r["condition"] for r in rows):
        parts = [f"AE {ae[cond]:.6g}"]
        if cond in co:
            parts.append(f"CO {co[cond]:.4g}%")
        if cond in rl:
            parts.append(f"RL {rl[cond]:.4g}%")
        if cond in attack:
            parts.append(f"attack AE {attack[cond]:.6g}")
        print(f"  {cond:>12}: " + ", ".join(parts))


def _cmd_run(args) -> int:
    config = _config_from_args(args)
    report = run_experiment(config)
    files = emit_report(report, args.out)
    print(f"ran {config.repetitions} repetitions of {len(config.conditions)} conditions "
          f"(seed {config.seed})")
    _print_headline(report)
    for path in files:
        print(f"wrote {path}")
    for note in report.notes:
        print(f"note: {note}")
    return 0


def _cmd_attack(args) -> int:
    config = replace(_config_from_args(args), attack=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if config.source == "toy":
        gen = ToyGenerator(dim=config.dim, qia_dims=config.qia_dims,
                           train_size=config.train_size, test_size=config.test_size,
                           noise_sigma=config.noise_sigma,
                           table_noise_sigma=config.table_noise_sigma, seed=config.seed)
        stream = RngStream(config.seed, "attack-study")
        data = generate_toy(gen, stream.child("data"))
        table = AttackTable(data.table_qia, data.table_ia)
        q = data.schema.qia_dims
        linkage_path = out / "attack_linkage.csv"
        with open(linkage_path, "w", encoding="utf8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["input_method", "linked_percent", "identified_percent"])
            print("attribute linkage against the external table:")
            for method in INPUT_METHODS:
                submitted = perturb_queries(method, data.test_inputs, data.schema,
                                            config, stream.child("query", method))
                verdicts = attribute_attack(submitted[:, :q], table, config.mu)
                identified = 100.0 * float(np.mean(
                    verdicts.linked & (verdicts.matched_index == np.arange(table.size))))
                writer.writerow([method, repr(verdicts.linked_percent), repr(identified)])
                print(f"  {method:>8}: linked {verdicts.linked_percent:.4g}%, "
                      f"identified {identified:.4g}%")
        print(f"wrote {linkage_path}")
    else:
        print("attribute linkage study requires the toy source; running extraction only")

    report = run_experiment(config)
    files = emit_report(report, out)
    print("extraction attack impact (AE -> attack AE):")
    _print_headline(report)
    for path in files:
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    rows = rows_from_csv(args.results)
    if not rows:
        raise SystemExit("results file holds no rows")
    header = []
    first = rows[0]
    if first.get("fingerprint"):
        header.append(f"- fingerprint: `{first['fingerprint']}`")
    if first.get("source"):
        header.append(f"- source: {first['source']}")
    header.append(f"- re-pivoted from {args.results}")
    repivot(rows, args.out, header)
    print(f"wrote {Path(args.out) / 'summary.md'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="privcollab",
        description="Privacy-preserving collaborative prediction simulator")
    parser.add_argument("--verbose", action="store_true", help="log debug detail")
    sub = parser.add_subparsers(dest="command", required=True)

    gen_p = sub.add_parser("generate", help="write a synthetic clinical CSV plus its sidecar")
    gen_p.add_argument("--out", required=True, help="CSV path to write")
    gen_p.add_argument("--size", type=int, default=10000, help="number of rows")
    gen_p.add_argument("--dim", type=int, default=5, help="input dimension")
    gen_p.add_argument("--qia-dims", type=int, default=1, dest="qia_dims",
                       help="leading input columns declared quasi-identifiers")
    gen_p.add_argument("--noise-sigma", type=float, default=float(np.sqrt(0.1)),
                       dest="noise_sigma", help="output noise scale")
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.set_defaults(func=_cmd_generate)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; defaults used when omitted")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--reps", type=int, default=None, help="override repetitions")
    common.add_argument("--threads", type=int, default=None, help="parallel repetition workers")
    common.add_argument("--out", default="results", help="output directory")

    run_p = sub.add_parser("run", parents=[common], help="run an experiment")
    run_p.set_defaults(func=_cmd_run)

    atk_p = sub.add_parser("attack", parents=[common],
                           help="adversary study: attribute linkage plus extraction")
    atk_p.set_defaults(func=_cmd_attack)

    rep_p = sub.add_parser("report", help="re-pivot an existing results.csv")
    rep_p.add_argument("--results", required=True, help="path to results.csv")
    rep_p.add_argument("--out", required=True, help="output directory")
    rep_p.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
