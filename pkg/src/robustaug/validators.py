"""Checks of the efficiency (A2) and confidence-gap (A6) assumptions, and the
paired / greedy / exact Wasserstein-1 estimates between the embeddings of a
sample set and of its transformed copy."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .models import Model, model_outputs, predict_labels
from .transforms import Transform, TransformFamily


def embed(model: Model, images: np.ndarray, use_logits: bool = False) -> np.ndarray:
    logits, probs = model_outputs(model, images)
    return logits if use_logits else probs


# ------------------------------------------------------------ array level


def a2_holds(orig: np.ndarray, transformed: np.ndarray) -> np.ndarray:
    """``holds[i]``: f(a(x_i)) is at least as close (l1) to f(x_i) as to any f(x_j), j != i."""
    n = len(orig)
    if n < 2:
        raise ValueError("need at least two samples")
    d = cdist(transformed, orig, metric="cityblock")
    own = np.diag(d).copy()
    np.fill_diagonal(d, np.inf)
    return own <= d.min(axis=1)


def paired_distance(orig: np.ndarray, transformed: np.ndarray) -> float:
    return float(np.abs(orig - transformed).sum())


def greedy_w1(orig: np.ndarray, transformed: np.ndarray) -> float:
    """Originals in index order each claim their nearest unclaimed transformed
    embedding (ties to the lowest index); returns the summed l1 cost."""
    d = cdist(orig, transformed, metric="cityblock")
    free = np.ones(len(transformed), dtype=bool)
    total = 0.0
    for i in range(len(orig)):
        row = np.where(free, d[i], np.inf)
        j = int(np.argmin(row))
        total += d[i, j]
        free[j] = False
    return float(total)


def exact_w1(orig: np.ndarray, transformed: np.ndarray, limit: int = 8) -> float:
    """Minimum over all matchings by brute force; only for ``n <= limit``."""
    n = len(orig)
    if n > limit:
        raise ValueError(f"exact W1 by enumeration limited to n <= {limit}, got {n}")
    d = cdist(orig, transformed, metric="cityblock")
    rows = np.arange(n)
    return float(min(d[rows, list(p)].sum() for p in itertools.permutations(range(n))))


# ------------------------------------------------------------ model level


def a2_fraction(model: Model, samples: np.ndarray, transform: Transform, use_logits: bool = False) -> float:
    orig = embed(model, samples, use_logits)
    moved = embed(model, transform(samples), use_logits)
    return float(a2_holds(orig, moved).mean())


def w1_estimates(model: Model, samples: np.ndarray, transform: Transform,
                 exact_limit: int = 8, use_logits: bool = False) -> tuple[float, float, float | None]:
    """``(paired, greedy, exact)``; exact is None when there are more than
    ``exact_limit`` samples."""
    orig = embed(model, samples, use_logits)
    moved = embed(model, transform(samples), use_logits)
    exact = exact_w1(orig, moved, exact_limit) if len(samples) <= exact_limit else None
    return paired_distance(orig, moved), greedy_w1(orig, moved), exact


def a6_holds(p_clean: np.ndarray, p_family: np.ndarray, pred_clean: np.ndarray, pred_worst: np.ndarray) -> np.ndarray:
    """``p_clean[i] / min_a p_family[a, i] >= exp(1[pred_clean != pred_worst])``."""
    gap = np.exp((pred_clean != pred_worst).astype(np.float64))
    return p_clean >= gap * p_family.min(axis=0)


def a6_fraction(model: Model, samples: np.ndarray, labels: np.ndarray, family: TransformFamily) -> float:
    """Fraction of samples whose clean true-class confidence exceeds the
    worst-case one by a factor e whenever the worst case flips the prediction."""
    views = family.apply_all(samples)
    t, n = views.shape[:2]
    _, probs = model_outputs(model, views.reshape(t * n, *views.shape[2:]))
    probs = probs.reshape(t, n, -1)
    p_family = probs[:, np.arange(n), labels]
    worst = np.argmin(p_family, axis=0)
    clean = probs[family.identity_index]
    pred_clean = predict_labels(clean)
    pred_worst = predict_labels(probs[worst, np.arange(n)])
    return float(a6_holds(clean[np.arange(n), labels], p_family, pred_clean, pred_worst).mean())


@dataclass
class ValidationReport:
    a2_frequency: float
    paired_distance: float
    greedy_w1: float
    exact_w1: float | None
    ratio: float
    a6_frequency: float | None
    n_samples: int
    transform: str
    model: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def validate(model: Model, samples: np.ndarray, labels: np.ndarray, transform: Transform,
             family: TransformFamily | None = None, exact_limit: int = 8,
             use_logits: bool = False, name: str = "") -> ValidationReport:
    orig = embed(model, samples, use_logits)
    moved = embed(model, transform(samples), use_logits)
    paired = paired_distance(orig, moved)
    greedy = greedy_w1(orig, moved)
    exact = exact_w1(orig, moved, exact_limit) if len(samples) <= exact_limit else None
    a6 = a6_fraction(model, samples, labels, family) if family is not None else None
    ratio = paired / greedy if greedy > 0 else 1.0
    return ValidationReport(float(a2_holds(orig, moved).mean()), paired, greedy, exact, ratio,
                            a6, len(samples), transform.name, name)


def format_table(reports: list[ValidationReport]) -> str:
    """Plain-text table with one column per model."""
    rows = [
        ("Frequency", lambda r: f"{r.a2_frequency:.3f}"),
        ("Paired Distance", lambda r: f"{r.paired_distance:.2f}"),
        ("Wasserstein (greedy)", lambda r: f"{r.greedy_w1:.2f}"),
        ("Paired/Wasserstein", lambda r: f"{r.ratio:.2f}"),
        ("A6 frequency", lambda r: "-" if r.a6_frequency is None else f"{r.a6_frequency:.3f}"),
    ]
    header = [""] + [r.model or f"model{i}" for i, r in enumerate(reports)]
    lines = [header] + [[label] + [fmt(r) for r in reports] for label, fmt in rows]
    widths = [max(len(line[c]) for line in lines) for c in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in lines)
