"""F2 scoring: thresholding, per-sample F2 and aggregate reports.

Scores are averaged per sample (mean of per-image F2), the usual
Kaggle protocol. Empty-set conventions: both empty -> 1, exactly one
empty -> 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_THRESHOLD = 0.5
DEFAULT_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass
class MetricsReport:
    f2: float
    precision: float
    recall: float
    threshold: float
    per_split: dict = field(default_factory=dict)


def threshold_scores(scores, t: float = DEFAULT_THRESHOLD) -> list[set[int]]:
    """Label sets with every class whose score is ``>= t``."""
    if not 0.0 < t < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {t}")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return [set(np.flatnonzero(row >= t).tolist()) for row in scores]


def f2_sample(pred, truth) -> float:
    pred, truth = set(pred), set(truth)
    if not pred and not truth:
        return 1.0
    if not pred or not truth:
        return 0.0
    tp = len(pred & truth)
    if tp == 0:
        return 0.0
    p = tp / len(pred)
    r = tp / len(truth)
    return 5.0 * p * r / (4.0 * p + r)


def _per_sample(pred: np.ndarray, truth: np.ndarray):
    # pred/truth are boolean (n, C); vectorized twin of f2_sample
    tp = np.sum(pred & truth, axis=1).astype(np.float64)
    n_pred = np.sum(pred, axis=1).astype(np.float64)
    n_true = np.sum(truth, axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(n_pred > 0, tp / n_pred, 0.0)
        r = np.where(n_true > 0, tp / n_true, 0.0)
        f2 = np.where(tp > 0, 5.0 * p * r / (4.0 * p + r), 0.0)
    both_empty = (n_pred == 0) & (n_true == 0)
    f2 = np.where(both_empty, 1.0, f2)
    p = np.where(both_empty, 1.0, p)
    r = np.where(both_empty, 1.0, r)
    return f2, p, r


def _as_truth_matrix(truths, num_classes: int) -> np.ndarray:
    if isinstance(truths, np.ndarray) and truths.ndim == 2:
        return truths.astype(bool)
    out = np.zeros((len(truths), num_classes), dtype=bool)
    for i, labels in enumerate(truths):
        out[i, list(labels)] = True
    return out


def sample_f2(scores, truths, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Per-sample F2 vector."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = _as_truth_matrix(truths, scores.shape[1])
    if truth.shape != scores.shape:
        raise ShapeError(f"scores {scores.shape} and truths {truth.shape} disagree")
    return _per_sample(scores >= t, truth)[0]


def evaluate(scores, truths, t: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Mean F2, precision and recall over samples.

    ``truths`` is either an (n, C) 0/1 matrix or a sequence of label sets.
    """
    if not 0.0 < t < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {t}")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if len(truths) != scores.shape[0]:
        raise ShapeError(f"{scores.shape[0]} score rows but {len(truths)} truths")
    truth = _as_truth_matrix(truths, scores.shape[1])
    if truth.shape != scores.shape:
        raise ShapeError(f"scores {scores.shape} and truths {truth.shape} disagree")
    f2, p, r = _per_sample(scores >= t, truth)
    return MetricsReport(float(np.mean(f2)), float(np.mean(p)), float(np.mean(r)), t)


def mean_f2(scores, truths, t: float = DEFAULT_THRESHOLD) -> float:
    return evaluate(scores, truths, t).f2


def tune_threshold(scores, truths, grid=DEFAULT_GRID) -> float:
    """Grid threshold maximizing mean F2; ties go to the smallest value."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ParameterError("threshold grid is empty")
    best_t, best = grid[0], -1.0
    for t in grid:
        score = mean_f2(scores, truths, t)
        if score > best:
            best_t, best = t, score
    return best_t


def report_csv(rows: dict[str, dict[str, float]]) -> str:
    """CSV with header ``network,validation,stage1,stage2``.

    ``rows`` maps a model name to ``{"validation": .., "stage1": .., "stage2": ..}``.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["network", "validation", "stage1", "stage2"])
    for name, cols in rows.items():
        writer.writerow([name] + [f"{cols[c]:.4f}" for c in ("validation", "stage1", "stage2")])
    return buf.getvalue()


def report_table(rows: dict[str, dict[str, float]]) -> str:
    """Aligned plain-text version of :func:`report_csv`."""
    header = ("network", "validation", "stage1", "stage2")
    body = [
        (name, *(f"{cols[c]:.4f}" for c in header[1:])) for name, cols in rows.items()
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = []
    for row in [header, *body]:
        cells = [row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
