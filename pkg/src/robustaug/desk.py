"""Desk-scale MNIST reproduction: five strategies on the rotation family,
assumption checks on the Base and RWA models, and an RWA run on the contrast
family for the worst-case selection counts.

Uses a 10,000-image training subset and the full test set; settings were
fixed once by a small calibration run and are not tuned per strategy."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .experiment import (
    ExperimentConfig,
    RunOutput,
    config_from_dict,
    load_datasets,
    resolve_family,
    run_strategy,
    run_table1,
    strategy_spec,
    validate_model,
    worst_case_totals,
)
from .validators import ValidationReport

log = logging.getLogger(__name__)

DEFAULT_MNIST_DIR = "/root/data/mnist"
EPOCHS = 12
LAMBDA = 0.1


def mnist_dir() -> Path:
    return Path(os.environ.get("ROBUSTAUG_MNIST_DIR", DEFAULT_MNIST_DIR))


def desk_config_dict(root=None, out: str = "runs/desk") -> dict:
    root = Path(root) if root is not None else mnist_dir()
    return {
        "dataset": {
            "source": "mnist",
            "train_images": str(root / "train-images-idx3-ubyte"),
            "train_labels": str(root / "train-labels-idx1-ubyte"),
            "test_images": str(root / "t10k-images-idx3-ubyte"),
            "test_labels": str(root / "t10k-labels-idx1-ubyte"),
            "train_limit": 10000,
        },
        "model": {"arch": "lenet"},
        "train": {"epochs": EPOCHS, "batch_size": 64, "lr": 0.01, "momentum": 0.9},
        "strategy": {"regularizer": {"metric": "sq_l2", "target": "logits"}},
        "family": "rotation",
        "evaluation": {"per_class_count": 50, "validate_samples": 1000},
        "table1": {"strategies": ["base", "va", "ra", "vwa", "rwa"], "lambdas": {"ra": LAMBDA, "rwa": LAMBDA}},
        "out": out,
        "seed": 0,
    }


def desk_config(root=None, out: str = "runs/desk") -> ExperimentConfig:
    return config_from_dict(desk_config_dict(root, out))


@dataclass
class DeskResult:
    runs: dict[str, RunOutput]            # label -> rotation-family run
    validation: dict[str, ValidationReport]
    contrast: RunOutput                    # RWA trained on the contrast family
    contrast_names: list[str]
    seconds: float

    def worst_case_counts(self) -> dict[str, int]:
        totals = worst_case_totals(self.contrast.result)
        return {name: int(c) for name, c in zip(self.contrast_names, totals)}


def run_desk(cfg: ExperimentConfig | None = None, out_dir=None) -> DeskResult:
    cfg = cfg or desk_config()
    t0 = time.perf_counter()
    train_set, test_set = load_datasets(cfg.dataset)
    rotation = resolve_family(cfg.family)
    runs = {r.label: r for r in run_table1(cfg, train_set, test_set, rotation, out_dir)}
    validation = {
        label: validate_model(cfg, runs[label].result.model, train_set, rotation, label)
        for label in ("BASE", "RWA")
    }
    contrast = resolve_family("contrast")
    spec = strategy_spec(cfg.strategy, "rwa", float(cfg.table1.lambdas.get("rwa", cfg.strategy.lam)))
    contrast_run = run_strategy(cfg, spec, train_set, test_set, contrast, out_dir, "_RWA_contrast")
    seconds = time.perf_counter() - t0
    log.info("desk reproduction finished in %.0fs", seconds)
    return DeskResult(runs, validation, contrast_run, contrast.names, seconds)


def small_to_large_ratio(counts: dict[str, int]) -> float:
    """Selections of the quarter-scale contrast members over the half-scale ones."""
    small = counts["x/4"] + counts["(1-x)/4"]
    large = counts["x/2"] + counts["(1-x)/2"]
    return float("inf") if large == 0 else small / large


def summary_lines(res: DeskResult) -> list[str]:
    lines = ["strategy  clean   robust  vertex  all     beyond  invariance"]
    for label, run in res.runs.items():
        r = run.report
        lines.append(f"{label:<9} {r.clean:.4f}  {r.robust:.4f}  {r.vertex:.4f}  {r.all:.4f}  "
                     f"{r.beyond:.4f}  {r.invariance:.4f}")
    for label, v in res.validation.items():
        lines.append(f"{label} validators: a2={v.a2_frequency:.3f} paired/greedy={v.ratio:.3f} a6={v.a6_frequency:.3f}")
    counts = res.worst_case_counts()
    lines.append("contrast worst-case counts: " + ", ".join(f"{k}={v}" for k, v in counts.items())
                 + f" (quarter/half ratio {small_to_large_ratio(counts):.2f})")
    lines.append(f"elapsed {res.seconds:.0f}s")
    return lines

