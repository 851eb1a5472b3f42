"""Training objectives: cross-entropy, consistency regularizers, the
exhaustive worst-case selector and the per-strategy composite loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor
from .models import Model, model_outputs
from .transforms import TransformFamily

STRATEGIES = ("base", "va", "ra", "vwa", "rwa")
PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class RegularizerKind:
    metric: str = "sq_l2"    # sq_l2 | l1 | kl
    target: str = "logits"   # logits | softmax

    def __post_init__(self):
        if self.metric not in ("sq_l2", "l1", "kl"):
            raise ValueError(f"unknown regularizer metric {self.metric!r}")
        if self.target not in ("logits", "softmax"):
            raise ValueError(f"unknown regularizer target {self.target!r}")
        if self.metric == "kl" and self.target != "softmax":
            raise ValueError("kl regularizer requires target='softmax'")


@dataclass(frozen=True)
class StrategySpec:
    strategy: str = "base"
    lam: float = 1.0
    regularizer: RegularizerKind = field(default_factory=RegularizerKind)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if isinstance(self.regularizer, dict):
            object.__setattr__(self, "regularizer", RegularizerKind(**self.regularizer))
        if self.strategy in ("ra", "rwa") and self.lam < 0:
            raise ValueError(f"{self.strategy} needs a non-negative lambda, got {self.lam}")

    @property
    def label(self) -> str:
        if self.strategy not in ("ra", "rwa"):
            return self.strategy.upper()
        reg = self.regularizer
        tag = self.strategy.upper()
        if reg.target == "softmax":
            tag += "_softmax"
        if reg.metric != "sq_l2":
            tag += "-" + reg.metric
        return tag

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``-ln p[i, y_i]`` (natural log, probabilities floored at 1e-30)."""
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = dc.sum(dc.log(probs, floor=PROB_FLOOR) * onehot, axis=1)
    return dc.mean(picked) * -1.0


def consistency_distance(a: Tensor, b: Tensor, kind: RegularizerKind) -> Tensor:
    """Batch mean of the row distance between representations ``a`` and ``b``.

    For ``kl`` the order is KL(a || b), i.e. (original || augmented).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if kind.metric == "sq_l2":
        rows = dc.sq_l2_distance(a, b)
    elif kind.metric == "l1":
        rows = dc.l1_distance(a, b)
    else:
        rows = dc.kl_rows(a, b, floor=PROB_FLOOR)
    return dc.mean(rows)


def true_class_probs(model: Model, views: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``p[a, i]`` = softmax probability of the true class of sample i under view a."""
    t, n = views.shape[:2]
    _, probs = model_outputs(model, views.reshape(t * n, *views.shape[2:]))
    return probs.reshape(t, n, -1)[:, np.arange(n), labels]


def select_worst_case(
    model: Model, images: np.ndarray, labels: np.ndarray, family: TransformFamily,
    views: np.ndarray | None = None, tape: Tape | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per sample, the family member with the lowest true-class probability
    (equivalently the highest cross-entropy); ties go to the lowest index.

    Runs without recording, so no gradient flows through the choice.
    ``views`` may carry the precomputed ``[t, n, ...]`` family outputs.
    """
    views = family.apply_all(images) if views is None else views
    p = true_class_probs(model, views, labels)
    worst = np.argmin(p, axis=0)
    if tape is not None:
        tape.note_decision(worst)
    return views[worst, np.arange(len(labels))], worst


def _forward(model: Model, x: np.ndarray, tape: Tape) -> tuple[Tensor, Tensor]:
    logits, _ = model.forward(x, tape)
    return logits, dc.softmax(logits)


def strategy_loss(
    spec: StrategySpec, model: Model, images: np.ndarray, labels: np.ndarray,
    family: TransformFamily | None = None, views: np.ndarray | None = None,
    tape: Tape | None = None,
) -> tuple[Tensor, dict]:
    """Scalar training loss for ``spec`` plus diagnostics.

    base: CE(x)
    va:   (CE(x) + CE(a+(x))) / 2
    ra:   va + lam * D(rep(x), rep(a+(x)))
    vwa:  CE(x_worst)
    rwa:  CE(x) + lam * D(rep(x), rep(x_worst))

    The loss is recorded on ``tape`` (a fresh one if omitted); call
    ``diffcore.backprop(loss.tape, loss)`` for gradients.
    """
    tape = Tape() if tape is None else tape
    s = spec.strategy
    if s != "base" and family is None:
        raise ValueError(f"strategy {s!r} needs a transformation family")
    diag: dict = {}
    reg_kind = spec.regularizer

    def rep(pair):
        return pair[1] if reg_kind.target == "softmax" else pair[0]

    if s == "base":
        clean = _forward(model, images, tape)
        loss = cross_entropy(clean[1], labels)
        diag["ce_clean"] = float(loss.data)
    elif s in ("va", "ra"):
        aug_images = views[family.vertex_plus] if views is not None else family[family.vertex_plus](images)
        clean = _forward(model, images, tape)
        aug = _forward(model, aug_images, tape)
        ce_clean = cross_entropy(clean[1], labels)
        ce_aug = cross_entropy(aug[1], labels)
        loss = (ce_clean + ce_aug) * 0.5
        diag.update(ce_clean=float(ce_clean.data), ce_aug=float(ce_aug.data))
        if s == "ra":
            reg = consistency_distance(rep(clean), rep(aug), reg_kind)
            loss = loss + reg * spec.lam
            diag["reg"] = float(reg.data)
    else:
        worst_images, worst = select_worst_case(model, images, labels, family, views, tape)
        diag["worst_hist"] = np.bincount(worst, minlength=len(family)).tolist()
        adv = _forward(model, worst_images, tape)
        ce_worst = cross_entropy(adv[1], labels)
        diag["ce_worst"] = float(ce_worst.data)
        if s == "vwa":
            loss = ce_worst
        else:
            clean = _forward(model, images, tape)
            ce_clean = cross_entropy(clean[1], labels)
            reg = consistency_distance(rep(clean), rep(adv), reg_kind)
            loss = ce_clean + reg * spec.lam
            diag.update(ce_clean=float(ce_clean.data), reg=float(reg.data))
    diag["loss"] = float(loss.data)
    return loss, diag
