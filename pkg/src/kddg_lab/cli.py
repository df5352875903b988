"""Command line entry point: ``kddg-lab <subcommand> [--config FILE] [--seed N] [--out DIR] [--quiet]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, harness, nn
from .config import ExperimentConfig, load_config
from .errors import ConfigError, NumericalError, RejectedInputError, RejectedParameterError
from .synthdata import gen_domains, read_csv, write_csv

log = logging.getLogger("kddg_lab")

SUBCOMMANDS = ("gen-data", "train", "noise-study", "rl", "diagnose", "bench")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kddg-lab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write the synthetic benchmark to data.csv",
        "train": "leave-one-domain-out training of the configured methods",
        "noise-study": "DeepAll under injected label noise over the noise grid",
        "rl": "mountain-car DQN baseline and distilled student",
        "diagnose": "CWD, domain-leakage MI and confidence histogram from saved artefacts",
        "bench": "per-iteration wall clock of deepall and kddg",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.output_dir = str(args.out)
    cfg.validate()
    return cfg


def write_manifest(out_dir: Path, cfg: ExperimentConfig, command: str, files) -> None:
    manifest = {
        "artifact": "kddg_lab",
        "version": __version__,
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "outputs": sorted(files),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_diagnostics(path: Path, rows, config_hash: str) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "unit", "config_hash"])
        for metric, value, unit in rows:
            writer.writerow([metric, repr(float(value)), unit, config_hash])


def _diagnose(cfg: ExperimentConfig) -> list:
    d = cfg.diagnose
    rows = []
    if d.snapshot_dir:
        rows.append(("cwd", diagnostics.cwd(diagnostics.load_snapshot_series(d.snapshot_dir)), "l2"))
    if d.feature_csv:
        dump = diagnostics.read_feature_dump(d.feature_csv)
        rows.append(("mi", diagnostics.mi_estimate(dump, d.folds, cfg.seeds[0]), "nats"))
    if d.checkpoint:
        if not d.data_csv:
            raise ConfigError("diagnose.checkpoint needs diagnose.data_csv for the confidence histogram")
        net = nn.load_network(d.checkpoint)
        sets = read_csv(d.data_csv)
        x = np.concatenate([s.features for s in sets])
        y = np.concatenate([s.labels for s in sets])
        conf = diagnostics.true_class_confidence(net, x, y)
        counts = diagnostics.confidence_histogram(conf, d.edges)
        for lo, hi, c in zip(d.edges[:-1], d.edges[1:], counts):
            rows.append((f"confidence_bin_{lo:g}_{hi:g}", int(c), "count"))
        rows.append(("fraction_above_0.999", float(np.mean(conf > 0.999)), "fraction"))
    if not rows:
        raise ConfigError("diagnose needs at least one of snapshot_dir, feature_csv, checkpoint")
    return rows


def run(command: str, cfg: ExperimentConfig) -> list[str]:
    """Execute one subcommand; returns the names of the files written."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if command == "gen-data":
        write_csv(out / "data.csv", gen_domains(cfg.benchmark), cfg.benchmark)
        written += ["data.csv", "data.csv.json"]
    elif command == "train":
        rows = harness.run_classification(cfg, out)
        harness.write_results(out / "results.csv", rows)
        written.append("results.csv")
    elif command == "noise-study":
        rows = harness.run_noise_study(cfg, out_dir=out)
        harness.write_results(out / "results.csv", rows)
        written.append("results.csv")
    elif command == "rl":
        rows = harness.run_rl(cfg, out)
        harness.write_results(out / "results.csv", rows)
        written.append("results.csv")
    elif command == "diagnose":
        write_diagnostics(out / "diagnostics.csv", _diagnose(cfg), cfg.hash())
        written.append("diagnostics.csv")
    elif command == "bench":
        harness.write_timing(out / "timing.csv", harness.bench_timing(cfg))
        written.append("timing.csv")
    else:  # argparse already restricts the choices
        raise ConfigError(f"unknown subcommand {command!r}")
    write_manifest(out, cfg, command, written)
    return written


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        files = run(args.command, cfg)
    except (ConfigError, RejectedInputError, RejectedParameterError, NumericalError, OSError) as exc:
        print(f"kddg-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for name in files:
        log.info("wrote %s", Path(cfg.output_dir) / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
