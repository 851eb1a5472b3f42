"""Seeded mini-batch SGD for any strategy, and the lambda sweep."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset, make_batches, train_val_split
from .diffcore import NonFiniteError, backprop, sgd_update
from .evaluation import accuracy_under, robust_accuracy
from .models import Model, ModelSpec, build_model
from .objectives import StrategySpec, strategy_loss
from .transforms import IDENTITY, TransformFamily

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(10.0 ** e for e in range(-4, 5))
# precompute family views of the training set when they fit in this many bytes
VIEW_CACHE_BYTES = 1_500_000_000


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, cause: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    strategy: StrategySpec = field(default_factory=StrategySpec)
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = StrategySpec(**self.strategy)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr >= 0 and momentum in [0, 1)")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    val_set: LabeledDataset
    step_losses: list[float]


def _views_needed(strategy: str, family: TransformFamily | None) -> list[int]:
    if strategy in ("va", "ra"):
        return [family.vertex_plus]
    if strategy in ("vwa", "rwa"):
        return list(range(len(family)))
    return []


def train(config: TrainConfig, dataset: LabeledDataset, model_spec: ModelSpec,
          family: TransformFamily | None = None, log_path=None) -> TrainResult:
    """Train from ``model_spec``'s seeded initialisation on the training part
    of ``dataset``; the held-out part is used for per-epoch validation."""
    train_set, val_set = train_val_split(dataset, config.val_fraction, config.seed)
    model = build_model(model_spec)
    spec = config.strategy
    needed = _views_needed(spec.strategy, family)
    cached = None
    if needed and train_set.images.nbytes * len(family) <= VIEW_CACHE_BYTES:
        cached = np.zeros((len(family),) + train_set.images.shape)
        for a in needed:
            cached[a] = family[a](train_set.images)

    records, step_losses = [], []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses, diag_sums, hist = [], {}, None
            for b, idx in enumerate(make_batches(len(train_set), config.batch_size, config.seed, epoch)):
                x, y = train_set.images[idx], train_set.labels[idx]
                views = None
                if cached is not None:
                    views = cached[:, idx]
                try:
                    loss, diag = strategy_loss(spec, model, x, y, family, views)
                    grads = backprop(loss.tape, loss)
                    sgd_update(model.params, grads, config.lr, config.momentum)
                except NonFiniteError as exc:
                    raise TrainingDiverged(epoch, b, str(exc)) from exc
                losses.append(diag["loss"])
                for k, v in diag.items():
                    if k == "worst_hist":
                        hist = np.add(hist, v) if hist is not None else np.array(v)
                    else:
                        diag_sums[k] = diag_sums.get(k, 0.0) + v
            step_losses.extend(losses)
            rec = {
                "epoch": epoch,
                "strategy": spec.label,
                "lambda": spec.lam,
                "mean_loss": float(np.mean(losses)),
                "diagnostics": {k: v / len(losses) for k, v in diag_sums.items()},
                "val_clean": accuracy_under(model, val_set, IDENTITY),
                "seconds": round(time.perf_counter() - t0, 3),
            }
            if hist is not None:
                rec["worst_hist"] = hist.tolist()
            records.append(rec)
            log.info("epoch %d %s loss=%.4f val_clean=%.4f (%.1fs)", epoch, spec.label,
                     rec["mean_loss"], rec["val_clean"], rec["seconds"])
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return TrainResult(model, records, val_set, step_losses)


def select_lambda(reports: list[dict]) -> float:
    """Lambda with the best validation robustness; ties go to the smaller lambda."""
    if not reports:
        raise ValueError("no sweep reports to select from")
    ordered = sorted(reports, key=lambda r: r["lambda"])
    best = max(r["val_robust"] for r in ordered)
    return next(r["lambda"] for r in ordered if r["val_robust"] == best)


def _sweep_one(args):
    config, dataset, model_spec, family, lam = args
    run = train(replace(config, strategy=replace(config.strategy, lam=lam)), dataset, model_spec, family)
    return {
        "lambda": lam,
        "val_robust": robust_accuracy(run.model, run.val_set, family),
        "val_clean": accuracy_under(run.model, run.val_set, IDENTITY),
        "final_loss": run.log[-1]["mean_loss"],
    }, run


def lambda_sweep(config: TrainConfig, dataset: LabeledDataset, model_spec: ModelSpec,
                 family: TransformFamily, grid=DEFAULT_LAMBDA_GRID, jobs: int = 1):
    """Train one model per lambda (same seed, same initialisation) and pick
    the lambda with the best validation worst-case accuracy.

    Returns ``(best_lambda, reports, models)`` with reports in grid order.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    if config.strategy.strategy not in ("ra", "rwa"):
        raise ValueError("lambda sweep applies to the ra and rwa strategies")
    tasks = [(config, dataset, model_spec, family, lam) for lam in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    reports = [r for r, _ in results]
    models = [m.model for _, m in results]
    return select_lambda(reports), reports, models
