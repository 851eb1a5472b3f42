"""Experiment configuration (strict JSON <-> nested dataclasses) and the
runners behind the command-line subcommands."""
from __future__ import annotations

import dataclasses
import json
import logging
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, load_idx, synth_generate
from .evaluation import MetricsReport, full_report
from .models import Model, ModelSpec, save_checkpoint
from .objectives import RegularizerKind, StrategySpec
from .training import DEFAULT_LAMBDA_GRID, TrainConfig, TrainResult, train
from .transforms import TransformFamily, make_family
from .validators import ValidationReport, validate

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------ config blocks


@dataclass
class SynthBlock:
    seed: int | None = None
    n_per_class: int = 50
    test_n_per_class: int = 20
    k: int = 4
    size: int = 16
    noise: float = 0.05


@dataclass
class DatasetBlock:
    source: str = "synthetic"  # synthetic | mnist
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    num_classes: int = 10
    synth: SynthBlock = field(default_factory=SynthBlock)


@dataclass
class ModelBlock:
    arch: str = "lenet"
    input_shape: list | None = None  # None: taken from the training images
    num_classes: int | None = None
    seed: int | None = None


@dataclass
class TrainBlock:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int | None = None
    val_fraction: float = 0.1


@dataclass
class RegularizerBlock:
    metric: str = "sq_l2"
    target: str = "logits"


@dataclass
class StrategyBlock:
    strategy: str = "base"
    lam: float = 1.0
    regularizer: RegularizerBlock = field(default_factory=RegularizerBlock)


@dataclass
class EvaluationBlock:
    per_class_count: int = 50
    beyond: bool = True
    use_logits: bool = False
    seed: int | None = None
    validate_samples: int = 1000
    exact_limit: int = 8


@dataclass
class SweepBlock:
    grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))


@dataclass
class Table1Block:
    strategies: list = field(default_factory=lambda: ["base", "va", "ra", "vwa", "rwa"])
    lambdas: dict = field(default_factory=dict)  # per-strategy lambda, else strategy.lam


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    strategy: StrategyBlock = field(default_factory=StrategyBlock)
    family: str | dict = "rotation"
    evaluation: EvaluationBlock = field(default_factory=EvaluationBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    table1: Table1Block = field(default_factory=Table1Block)
    checkpoint: str | None = None
    out: str = "runs/default"
    seed: int = 0  # fills every block seed left unset

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ strict parsing

_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,), dict: (dict,)}


def _type_ok(value, hint) -> bool:
    if hint is type(None):
        return value is None
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if isinstance(value, bool) and hint is not bool:
        return False
    return isinstance(value, _SCALARS.get(hint, (object,)))


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, where)
        elif not _type_ok(value, hint):
            raise ConfigError(f"config key '{where}' has the wrong type ({type(value).__name__})")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _materialize(cfg: ExperimentConfig) -> ExperimentConfig:
    for block in (cfg.dataset.synth, cfg.model, cfg.train, cfg.evaluation):
        if block.seed is None:
            block.seed = cfg.seed
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    return _materialize(_build(ExperimentConfig, data, ""))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``a.b.c=VALUE`` with VALUE parsed as JSON, falling back to a plain string."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: '{part}' is not a block")
            node = nxt
        node[parts[-1]] = value
    return data


def parse_config(path, overrides: list[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(apply_overrides(data, list(overrides)))


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return path


# ------------------------------------------------------------ builders


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"dataset.{what} must be set for the mnist source")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset.{what}: file not found: {p}")
    return p


def load_datasets(block: DatasetBlock) -> tuple[LabeledDataset, LabeledDataset]:
    if block.source == "synthetic":
        s = block.synth
        # the test split uses the next seed so it shares no noise draws with training
        return (synth_generate(s.seed, s.n_per_class, s.k, s.size, s.noise),
                synth_generate(s.seed + 1, s.test_n_per_class, s.k, s.size, s.noise))
    if block.source == "mnist":
        tr = load_idx(_require(block.train_images, "train_images"), _require(block.train_labels, "train_labels"),
                      block.num_classes, block.train_limit)
        te = load_idx(_require(block.test_images, "test_images"), _require(block.test_labels, "test_labels"),
                      block.num_classes, block.test_limit)
        return tr, te
    raise ConfigError(f"dataset.source must be 'synthetic' or 'mnist', got {block.source!r}")


def resolve_family(spec: str | dict) -> TransformFamily:
    if isinstance(spec, dict):
        return TransformFamily.from_dict(spec)
    return make_family(spec)


def model_spec(cfg: ExperimentConfig, dataset: LabeledDataset) -> ModelSpec:
    m = cfg.model
    shape = tuple(m.input_shape) if m.input_shape else dataset.image_shape
    classes = m.num_classes or dataset.num_classes
    return ModelSpec(m.arch, shape, classes, m.seed)


def strategy_spec(block: StrategyBlock, strategy: str | None = None, lam: float | None = None) -> StrategySpec:
    return StrategySpec(strategy or block.strategy, block.lam if lam is None else lam,
                        RegularizerKind(block.regularizer.metric, block.regularizer.target))


def train_config(cfg: ExperimentConfig, strategy: StrategySpec) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.batch_size, t.lr, t.momentum, t.seed, strategy, t.val_fraction)


# ------------------------------------------------------------ runners


@dataclass
class RunOutput:
    label: str
    result: TrainResult
    report: MetricsReport


def run_strategy(cfg: ExperimentConfig, strategy: StrategySpec, train_set: LabeledDataset,
                 test_set: LabeledDataset, family: TransformFamily, out_dir=None,
                 suffix: str = "") -> RunOutput:
    """Train one model, write its checkpoint and log, and evaluate it on ``test_set``."""
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / f"log{suffix}.jsonl"
    needs_family = strategy.strategy != "base"
    result = train(train_config(cfg, strategy), train_set, model_spec(cfg, train_set),
                   family if needs_family else None, log_path)
    if out_dir is not None:
        save_checkpoint(result.model, Path(out_dir) / f"model{suffix}.npz",
                        extra={"strategy": strategy.to_dict(), "family": family.name})
    report = evaluate_model(cfg, result.model, test_set, family, strategy.label, strategy.lam)
    return RunOutput(strategy.label, result, report)


def evaluate_model(cfg: ExperimentConfig, model: Model, test_set: LabeledDataset,
                   family: TransformFamily, label: str = "", lam: float | None = None) -> MetricsReport:
    e = cfg.evaluation
    return full_report(model, test_set, family, per_class_count=e.per_class_count or None, seed=e.seed,
                       include_beyond=e.beyond, use_logits=e.use_logits, strategy=label, lam=lam)


def validate_model(cfg: ExperimentConfig, model: Model, train_set: LabeledDataset,
                   family: TransformFamily, name: str = "") -> ValidationReport:
    """Assumption checks on the first ``validate_samples`` training images
    against the family's non-identity vertex."""
    n = min(cfg.evaluation.validate_samples, len(train_set))
    vertex = family[family.vertex_plus]
    return validate(model, train_set.images[:n], train_set.labels[:n], vertex, family,
                    cfg.evaluation.exact_limit, cfg.evaluation.use_logits, name)


def run_table1(cfg: ExperimentConfig, train_set: LabeledDataset, test_set: LabeledDataset,
               family: TransformFamily, out_dir=None) -> list[RunOutput]:
    """Every strategy in ``cfg.table1.strategies`` from the same seeds."""
    runs = []
    for name in cfg.table1.strategies:
        lam = cfg.table1.lambdas.get(name)
        spec = strategy_spec(cfg.strategy, name, None if lam is None else float(lam))
        log.info("table1: training %s", spec.label)
        runs.append(run_strategy(cfg, spec, train_set, test_set, family, out_dir, f"_{spec.label}"))
    return runs


def worst_case_totals(result: TrainResult) -> np.ndarray:
    """Selection counts of each family member summed over all epochs."""
    return np.sum([r["worst_hist"] for r in result.log], axis=0)
