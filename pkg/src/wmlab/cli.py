"""``wmlab`` command line: run directories, pipeline stages, attacks, verification, reports.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .data import DATA_ENV, fetch_fashion_mnist, import_fashion_mnist_npm
from .models import load_checkpoint
from .pipeline import (ATTACKS, STAGES, ConfigError, RunConfig, RunDir, emit_report, load_keys,
                       run_attack, run_pipeline, run_stage)
from .verification import DEFAULT_THRESHOLD, guarantee_table, verify_ownership

log = logging.getLogger("wmlab")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _load_config(path: str | None, overrides: list[str]) -> RunConfig:
    if path is None:
        raw = {}
    else:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(value)
    return RunConfig.from_dict(raw)


def _parse_value(text: str):
    return yaml.safe_load(text)


# --------------------------------------------------------------------------- commands

def cmd_config(args) -> int:
    cfg = _load_config(args.config, args.set)
    sys.stdout.write(cfg.to_yaml())
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.set)
    run = run_pipeline(cfg, args.output)
    m = run.manifest()["metrics"]
    print(json.dumps({k: m[k] for k in ("benign_acc", "victim_acc", "key_count", "victim_key_wsr",
                                        "benign_key_wsr", "victim_decision") if k in m}, indent=2))
    print(f"run directory: {run.path}")
    return EXIT_OK


def cmd_stage(args) -> int:
    run = RunDir(args.run)
    cfg = _load_config(args.config, args.set) if (args.config or args.set or not run.exists()) else None
    if cfg is not None and run.exists():
        if cfg.digest() != run.manifest()["config_hash"]:
            raise ConfigError(f"{run.path} was created with a different config")
    run_stage(run, args.command, cfg)
    print(f"{args.command}: done ({run.path})")
    return EXIT_OK


def cmd_verify(args) -> int:
    run = RunDir(args.run)
    keys = load_keys(run)
    target = args.model
    if target in run.manifest()["artifacts"]:
        model = load_checkpoint(run.artifact(target))
    else:
        model = load_checkpoint(target)
    threshold = args.threshold if args.threshold is not None else run.manifest()["config"]["threshold"]
    if not 0 < threshold < 1:
        raise ConfigError("threshold: must lie in (0, 1)")
    report = verify_ownership(model, keys, threshold, model_id=str(target), key_set_id=str(run.path / "keys"),
                              path=args.out)
    print(f"model={report.model_id} n={report.n} hits={report.hits} wsr={report.wsr:.4f} "
          f"T={report.threshold} decision={report.decision}")
    return EXIT_OK


def cmd_attack(args) -> int:
    run = RunDir(args.run)
    params = {}
    for name in ATTACK_OPTIONS[args.attack]:
        value = getattr(args, name)
        if value is not None:
            params[name] = value
    for item in args.param:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"parameter {item!r} must look like key=value")
        params[key] = _parse_value(value)
    schedule = {}
    if args.epochs is not None:
        schedule["epochs"] = args.epochs
    if args.seed is not None:
        schedule["seed"] = args.seed
    if schedule:
        params["schedule"] = schedule
    try:
        result = run_attack(run, args.attack, params, args.id, args.target)
    except TypeError as exc:
        raise ConfigError(f"attack parameters: {exc}") from exc
    print(f"{args.attack}: acc={result.acc:.4f} wsr={result.wsr:.4f} decision={result.decision} "
          f"({result.wall_clock:.1f}s)")
    return EXIT_OK


def cmd_guarantees(args) -> int:
    rows = guarantee_table(args.n, args.K, args.T)
    print(f"{'n':>6} {'K':>5} {'T':>6}  {'P[false positive]':>24}  {'P[crack sources]':>16}  {'P[crack both]':>14}")
    for r in rows:
        crack = f"{r['crack']:.4g}" if "crack" in r else "-"
        joint = f"{r['joint']:.4g}" if "joint" in r else "-"
        print(f"{r['n']:>6} {r['K']:>5} {r['T']:>6}  {r['display']:>24}  {crack:>16}  {joint:>14}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = emit_report(args.run)
    print(f"{'row':<40} {'acc':>8} {'dAcc':>8} {'wsr':>8}  decision")
    for r in report["rows"]:
        print(f"{r['row']:<40} {r['acc']:>8.4f} {r['delta_acc']:>+8.4f} {r['wsr']:>8.4f}  {r['decision']}")
    print(f"wrote {Path(args.run) / 'report.json'} and report.csv")
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    path = import_fashion_mnist_npm(args.package, args.out) if args.package else fetch_fashion_mnist(args.out)
    print(f"Fashion-MNIST cache: {path}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

ATTACK_OPTIONS = {
    "steal": {"label_mode": dict(choices=("soft", "hard")), "temperature": dict(type=float),
              "student_arch": {}, "query_slice": {}},
    "jbda": {"label_mode": dict(choices=("soft", "hard")), "rounds": dict(type=int),
             "lambda_step": dict(type=float), "seed_count": dict(type=int), "cap": dict(type=int),
             "student_arch": {}},
    "finetune": {"mode": dict(choices=("FTLL", "FTAL", "RTLL", "RTAL"))},
    "prune": {"rate": dict(type=float)},
    "quantize": {"bits": dict(type=int)},
    "preprocess": {"method": dict(choices=("blur", "noise", "input_quantize", "crop")),
                   "strength": dict(type=float)},
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (defaults are used for missing keys)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value, e.g. benign.epochs=2 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"wmlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the effective configuration")
    p.add_argument("--print-defaults", action="store_true", help="print every default value")
    _add_config_args(p)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("run", help="run every pipeline stage into a fresh run directory")
    _add_config_args(p)
    p.add_argument("--output", help="run directory (overrides output_dir)")
    p.set_defaults(func=cmd_run)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--run", required=True, help="run directory")
        _add_config_args(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("verify", help="check a suspect model against the run's key samples")
    p.add_argument("--run", required=True)
    p.add_argument("--model", required=True, help="checkpoint path or run artifact name (victim, benign)")
    p.add_argument("--threshold", type=float, help=f"WSR threshold (default: run config, {DEFAULT_THRESHOLD})")
    p.add_argument("--out", help="write the verification report JSON here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="simulate an adversary against a completed run")
    attacks = p.add_subparsers(dest="attack", required=True)
    for name in ATTACKS:
        a = attacks.add_parser(name)
        a.add_argument("--run", required=True)
        a.add_argument("--id", help="attack id; results go to attacks/<id>/")
        a.add_argument("--target", default="victim", help="artifact name or checkpoint to attack")
        a.add_argument("--epochs", type=int, help="training epochs (stealing, fine-tuning)")
        a.add_argument("--seed", type=int, help="attack seed")
        a.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
        for opt, kw in ATTACK_OPTIONS[name].items():
            a.add_argument(f"--{opt.replace('_', '-')}", dest=opt, **kw)
        a.set_defaults(func=cmd_attack)

    p = sub.add_parser("guarantees", help="false-positive and crack probabilities")
    p.add_argument("--n", type=int, nargs="+", default=[10, 100, 2000])
    p.add_argument("--K", type=int, nargs="+", default=[10, 100])
    p.add_argument("--T", type=float, nargs="+", default=[DEFAULT_THRESHOLD])
    p.set_defaults(func=cmd_guarantees)

    p = sub.add_parser("report", help="consolidate benign, victim and attack rows")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fetch-data", help=f"build the Fashion-MNIST cache (under ${DATA_ENV})")
    p.add_argument("--package", help="local npm package directory or .tgz instead of `npm pack`")
    p.add_argument("--out", help="cache file path")
    p.set_defaults(func=cmd_fetch_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
