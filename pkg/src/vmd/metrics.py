"""Binary classification metrics: ROC AUC, accuracy, precision, recall, F-beta."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("roc_auc", "accuracy", "precision", "recall", "fbeta")


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. ROC with one class)."""


@dataclass
class MetricReport:
    roc_auc: Optional[float]
    accuracy: float
    precision: float
    recall: float
    fbeta: float
    confusion_matrix: list  # [[TN, FP], [FN, TP]]
    n: int
    threshold: float = 0.5
    beta: float = 0.5
    errors: list = field(default_factory=list)

    @property
    def tp(self) -> int:
        return self.confusion_matrix[1][1]

    @property
    def tn(self) -> int:
        return self.confusion_matrix[0][0]

    @property
    def fp(self) -> int:
        return self.confusion_matrix[0][1]

    @property
    def fn(self) -> int:
        return self.confusion_matrix[1][0]

    def to_dict(self) -> dict:
        return {
            "roc_auc": self.roc_auc,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "fbeta": self.fbeta,
            "confusion_matrix": self.confusion_matrix,
            "n": self.n,
            "threshold": self.threshold,
            "beta": self.beta,
            "errors": list(self.errors),
        }


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise ValueError("metrics need at least one sample")
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic (ties averaged)."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def compute_metrics(scores, labels, threshold: float = 0.5, beta: float = 0.5) -> MetricReport:
    """Metric suite for positive-class scores; a sample is predicted positive
    when its score is >= threshold. An undefined ROC AUC is reported as
    ``None`` with the reason in ``errors``."""
    scores, labels = _validate(scores, labels)
    errors = []
    try:
        auc: Optional[float] = roc_auc(scores, labels)
    except UndefinedMetricError as exc:
        auc = None
        errors.append(str(exc))
    pred = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    b2 = beta * beta
    fbeta = _ratio((1 + b2) * precision * recall, b2 * precision + recall)
    return MetricReport(
        roc_auc=auc,
        accuracy=(tp + tn) / labels.size,
        precision=precision,
        recall=recall,
        fbeta=fbeta,
        confusion_matrix=[[tn, fp], [fn, tp]],
        n=int(labels.size),
        threshold=threshold,
        beta=beta,
        errors=errors,
    )


def summarize(reports: Sequence[MetricReport]) -> dict:
    """Mean and sample standard deviation of each metric across reports."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=float)
        if vals.size == 0:
            out[name] = {"mean": None, "std": None}
            continue
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[name] = {"mean": float(vals.mean()), "std": std}
    return out
