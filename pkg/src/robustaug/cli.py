"""Command-line entry point: ``robustaug <subcommand> --config c.json``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import IdxFormatError, write_idx
from .diffcore import GraphShapeError
from .evaluation import invariance_score, write_csv
from .experiment import (
    ConfigError,
    ExperimentConfig,
    evaluate_model,
    load_datasets,
    model_spec,
    parse_config,
    resolve_family,
    run_table1,
    strategy_spec,
    train_config,
    validate_model,
    write_resolved,
)
from .models import load_checkpoint, save_checkpoint
from .training import TrainingDiverged, lambda_sweep, train
from .validators import format_table

log = logging.getLogger("robustaug")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_BAD_DATA = 5
EXIT_DIVERGED = 6

COMMANDS = ("train", "evaluate", "invariance", "validate-assumptions", "sweep", "synth-data", "table1")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _checkpoint_path(cfg: ExperimentConfig, out: Path) -> Path:
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.npz"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_train(cfg, out, args):
    tr, _ = load_datasets(cfg.dataset)
    family = resolve_family(cfg.family)
    spec = strategy_spec(cfg.strategy)
    result = train(train_config(cfg, spec), tr, model_spec(cfg, tr),
                   family if spec.strategy != "base" else None, out / "log.jsonl")
    save_checkpoint(result.model, out / "model.npz", extra={"strategy": spec.to_dict(), "family": family.name})
    print(f"{spec.label}: val_clean={result.log[-1]['val_clean']:.4f} -> {out / 'model.npz'}")


def cmd_evaluate(cfg, out, args):
    _, te = load_datasets(cfg.dataset)
    family = resolve_family(cfg.family)
    model = load_checkpoint(_checkpoint_path(cfg, out))
    spec = strategy_spec(cfg.strategy)
    report = evaluate_model(cfg, model, te, family, spec.label, spec.lam)
    write_csv([report], out / "metrics.csv")
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(write_csv([report]), end="")


def cmd_invariance(cfg, out, args):
    _, te = load_datasets(cfg.dataset)
    family = resolve_family(cfg.family)
    model = load_checkpoint(_checkpoint_path(cfg, out))
    e = cfg.evaluation
    score = invariance_score(model, te, family, e.per_class_count, e.seed, e.use_logits)
    _write_json(out / "invariance.json", {"family": family.name, "invariance": score,
                                          "per_class_count": e.per_class_count, "seed": e.seed})
    print(f"invariance[{family.name}] = {score:.4f}")


def cmd_validate(cfg, out, args):
    tr, _ = load_datasets(cfg.dataset)
    family = resolve_family(cfg.family)
    path = _checkpoint_path(cfg, out)
    report = validate_model(cfg, load_checkpoint(path), tr, family, path.stem)
    (out / "validation.json").write_text(report.to_json() + "\n")
    print(format_table([report]))


def cmd_sweep(cfg, out, args):
    tr, te = load_datasets(cfg.dataset)
    family = resolve_family(cfg.family)
    spec = strategy_spec(cfg.strategy)
    best, reports, models = lambda_sweep(train_config(cfg, spec), tr, model_spec(cfg, tr), family,
                                         [float(g) for g in cfg.sweep.grid], jobs=args.jobs)
    _write_json(out / "sweep.json", {"strategy": spec.label, "best_lambda": best, "reports": reports})
    chosen = models[[r["lambda"] for r in reports].index(best)]
    save_checkpoint(chosen, out / "model.npz", extra={"strategy": spec.to_dict(), "lambda": best})
    report = evaluate_model(cfg, chosen, te, family, spec.label, best)
    write_csv([report], out / "metrics.csv")
    (out / "metrics.json").write_text(report.to_json() + "\n")
    for r in reports:
        print(f"lambda={r['lambda']:g}  val_robust={r['val_robust']:.4f}  val_clean={r['val_clean']:.4f}")
    print(f"selected lambda={best:g}")


def cmd_synth(cfg, out, args):
    if cfg.dataset.source != "synthetic":
        raise ConfigError("synth-data needs dataset.source = 'synthetic'")
    tr, te = load_datasets(cfg.dataset)
    for name, ds in (("train", tr), ("t10k", te)):
        write_idx(ds, out / f"{name}-images-idx3-ubyte", out / f"{name}-labels-idx1-ubyte")
    print(f"wrote {len(tr)} training and {len(te)} test samples to {out}")


def cmd_table1(cfg, out, args):
    tr, te = load_datasets(cfg.dataset)
    family = resolve_family(cfg.family)
    runs = run_table1(cfg, tr, te, family, out)
    reports = [r.report for r in runs]
    write_csv(reports, out / "metrics.csv")
    (out / "metrics.json").write_text("[\n" + ",\n".join(r.to_json() for r in reports) + "\n]\n")
    print(write_csv(reports), end="")


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "invariance": cmd_invariance,
    "validate-assumptions": cmd_validate,
    "sweep": cmd_sweep,
    "synth-data": cmd_synth,
    "table1": cmd_table1,
}

HELP = {
    "train": "train one strategy and write model.npz and log.jsonl",
    "evaluate": "score a checkpoint and write metrics.csv and metrics.json",
    "invariance": "compute the retrieval invariance score of a checkpoint",
    "validate-assumptions": "run the embedding-geometry validators on a checkpoint",
    "sweep": "train over the lambda grid and keep the best validation model",
    "synth-data": "export the synthetic dataset as IDX files",
    "table1": "train and evaluate all configured strategies on one family",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustaug", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value); repeatable")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep")
        p.add_argument("--family", help="transformation family (overrides config 'family')")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"out={json.dumps(args.out)}")
        if args.family:
            overrides.append(f"family={json.dumps(args.family)}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = parse_config(args.config, overrides)
        out = Path(cfg.out)
        write_resolved(cfg, out)
        HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"robustaug: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"robustaug: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (IdxFormatError, GraphShapeError) as exc:
        print(f"robustaug: bad data: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA
    except TrainingDiverged as exc:
        print(f"robustaug: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"robustaug: invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
