"""Clean / worst-case / vertex / all / beyond accuracy and the invariance test."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import LabeledDataset
from .models import Model, model_outputs, predict_labels
from .transforms import Transform, TransformFamily

CSV_COLUMNS = ("strategy", "family", "lambda", "seed", "clean", "robust", "vertex", "all", "beyond", "invariance")


def correct_under(model: Model, dataset: LabeledDataset, transform: Transform, chunk: int = 2000) -> np.ndarray:
    """Boolean vector: sample i classified correctly after ``transform``."""
    hits = []
    for start in range(0, len(dataset), chunk):
        x = transform(dataset.images[start:start + chunk])
        _, probs = model_outputs(model, x)
        hits.append(predict_labels(probs) == dataset.labels[start:start + chunk])
    return np.concatenate(hits)


def accuracy_under(model: Model, dataset: LabeledDataset, transform: Transform) -> float:
    return float(correct_under(model, dataset, transform).mean())


def robust_accuracy(model: Model, dataset: LabeledDataset, family: TransformFamily,
                    per_transform: list | None = None) -> float:
    """Fraction of samples classified correctly under every member of ``family``.

    If ``per_transform`` is a list, each member's accuracy is appended in order.
    """
    all_ok = np.ones(len(dataset), dtype=bool)
    for a in family:
        ok = correct_under(model, dataset, a)
        if per_transform is not None:
            per_transform.append(float(ok.mean()))
        all_ok &= ok
    return float(all_ok.mean())


def overlap_scores(emb: np.ndarray, t: int) -> np.ndarray:
    """Neighbour-overlap score of every pool element.

    ``emb`` is ``[t, m, d]``: the embedding of source s under member a.  The
    pool is ordered member-major (pool index ``a * m + s``).  Each element
    ranks the whole pool, itself included, by l1 distance with ties broken by
    pool index, keeps the first t, and scores the fraction of those that are
    copies of its own source.
    """
    tt, m, d = emb.shape
    if tt != t:
        raise ValueError("embedding stack does not match family size")
    pool = emb.reshape(t * m, d)
    dist = cdist(pool, pool, metric="cityblock")
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :t]
    source = np.tile(np.arange(m), t)
    return (source[nearest] == source[:, None]).sum(axis=1) / t


def invariance_score(model: Model, dataset: LabeledDataset, family: TransformFamily,
                     per_class_count: int = 50, seed: int = 0, use_logits: bool = False) -> float:
    """Per class: sample ``per_class_count`` images, pool all their transformed
    copies, score top-t retrieval overlap with each element's own orbit;
    average over the pool, then over classes.  Lies in [1/t, 1]."""
    t = len(family)
    if t < 2:
        raise ValueError("invariance test needs a family with at least two members")
    rng = np.random.default_rng(seed)
    class_scores = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        # identical copies would retrieve each other; keep first occurrences
        flat = dataset.images[members].reshape(len(members), -1)
        _, first = np.unique(flat, axis=0, return_index=True)
        members = members[np.sort(first)]
        if len(members) == 0:
            continue
        if len(members) < per_class_count:
            raise ValueError(f"class {c} has {len(members)} samples, fewer than per_class_count={per_class_count}")
        pick = np.sort(rng.choice(members, size=per_class_count, replace=False))
        views = family.apply_all(dataset.images[pick])
        logits, probs = model_outputs(model, views.reshape(t * per_class_count, *views.shape[2:]))
        emb = (logits if use_logits else probs).reshape(t, per_class_count, -1)
        class_scores.append(overlap_scores(emb, t).mean())
    return float(np.mean(class_scores))


@dataclass
class MetricsReport:
    clean: float
    robust: float
    vertex: float
    all: float
    beyond: float | None
    invariance: float | None
    per_transform: dict[str, float] = field(default_factory=dict)
    per_beyond: dict[str, float] = field(default_factory=dict)
    strategy: str = ""
    family: str = ""
    lam: float | None = None
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        values = asdict(self)
        values["lambda"] = values.pop("lam")
        return {c: ("" if values[c] is None else values[c]) for c in CSV_COLUMNS}


def write_csv(reports: list[MetricsReport], path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def full_report(model: Model, dataset: LabeledDataset, family: TransformFamily,
                per_class_count: int | None = 50, seed: int = 0, include_beyond: bool = True,
                use_logits: bool = False, **metadata) -> MetricsReport:
    """Every metric for one model on one dataset.  ``per_class_count=None``
    skips the invariance test."""
    accs: list[float] = []
    robust = robust_accuracy(model, dataset, family, accs)
    per = {a.name: acc for a, acc in zip(family, accs)}
    clean = accs[family.identity_index]
    vertex = (accs[family.vertex_plus] + accs[family.vertex_minus]) / 2
    beyond = None
    per_beyond = {}
    if include_beyond and family.beyond:
        for a in family.beyond:
            per_beyond[a.name] = accuracy_under(model, dataset, a)
        beyond = float(np.mean(list(per_beyond.values())))
    inv = None
    if per_class_count:
        inv = invariance_score(model, dataset, family, per_class_count, seed, use_logits)
    return MetricsReport(clean, robust, vertex, float(np.mean(accs)), beyond, inv, per, per_beyond,
                         family=family.name, seed=seed, **metadata)
