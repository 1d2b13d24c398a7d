"""Aggregate and per-class classification metrics plus the two reference baselines."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class MetricsReport:
    top1: float
    top5: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    macro_precision: float
    macro_recall: float
    support: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.support)


@dataclass
class AccuracyDelta:
    deltas: np.ndarray  # recall(b) - recall(a), zero where nothing changed
    changed: np.ndarray  # classes with at least one changed prediction

    def items(self) -> list[tuple[int, float]]:
        return [(int(c), float(self.deltas[c])) for c in np.flatnonzero(self.changed)]


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty prediction set")
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"{scores.shape[0]} score rows vs {labels.shape[0]} labels")
    return scores, labels


def ranked_classes(scores: np.ndarray) -> np.ndarray:
    """Classes by descending score; equal scores keep ascending class order."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def topk_accuracy(scores, labels, k: int = 1) -> float:
    scores, labels = _check(scores, labels)
    if k < 1:
        raise ValueError("k must be >= 1")
    top = ranked_classes(scores)[:, :k]
    return float(np.mean((top == labels[:, None]).any(axis=1)))


def precision_recall_from_predictions(pred: np.ndarray, labels: np.ndarray, num_classes: int):
    tp = np.bincount(labels[pred == labels], minlength=num_classes)[:num_classes].astype(np.float64)
    predicted = np.bincount(pred, minlength=num_classes)[:num_classes].astype(np.float64)
    support = np.bincount(labels, minlength=num_classes)[:num_classes]
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    return precision, recall, support


def per_class_precision_recall(scores, labels, num_classes: int | None = None):
    """Per-class precision/recall of argmax decisions and their macro means.

    Never-predicted classes get precision 0; macro means run over classes
    with non-zero test support.
    """
    scores, labels = _check(scores, labels)
    c = num_classes or scores.shape[1]
    precision, recall, support = precision_recall_from_predictions(scores.argmax(axis=1), labels, c)
    present = support > 0
    return precision, recall, float(precision[present].mean()), float(recall[present].mean()), support


def evaluate(scores, labels, num_classes: int | None = None) -> MetricsReport:
    scores, labels = _check(scores, labels)
    p, r, mp, mr, support = per_class_precision_recall(scores, labels, num_classes)
    k5 = min(5, scores.shape[1])
    return MetricsReport(topk_accuracy(scores, labels, 1), topk_accuracy(scores, labels, k5), p, r, mp, mr, support)


def accuracy_difference(scores_a, scores_b, labels) -> AccuracyDelta:
    """Per-class recall change from ``a`` to ``b`` over classes whose predictions moved."""
    scores_a, labels = _check(scores_a, labels)
    scores_b, _ = _check(scores_b, labels)
    if scores_a.shape != scores_b.shape:
        raise ValueError("score matrices cover different class spaces")
    c = scores_a.shape[1]
    pa, pb = scores_a.argmax(axis=1), scores_b.argmax(axis=1)
    _, ra, _ = precision_recall_from_predictions(pa, labels, c)
    _, rb, _ = precision_recall_from_predictions(pb, labels, c)
    changed = np.zeros(c, dtype=bool)
    changed[np.unique(labels[pa != pb])] = True
    return AccuracyDelta(np.where(changed, rb - ra, 0.0), changed)


def confusion_matrix(pred_labels, labels, num_classes: int, normalize: str | None = "row",
                     min_support: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows are true classes. Returns ``(matrix, kept_classes)``.

    ``min_support`` keeps only classes with strictly more test samples.
    """
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    m = np.zeros((num_classes, num_classes))
    np.add.at(m, (labels, pred_labels), 1.0)
    support = m.sum(axis=1)
    if normalize == "row":
        m = np.divide(m, support[:, None], out=np.zeros_like(m), where=support[:, None] > 0)
    elif normalize is not None:
        raise ValueError(f"unknown normalization {normalize!r}")
    kept = np.arange(num_classes)
    if min_support is not None:
        kept = np.flatnonzero(support > min_support)
        m = m[np.ix_(kept, kept)]
    return m, kept


def largest_class_baseline(train_labels, test_labels, num_classes: int) -> MetricsReport:
    """Always predict the most frequent training classes (ties: lower index)."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if train_labels.size == 0:
        raise ValueError("empty training labels")
    counts = np.bincount(train_labels, minlength=num_classes).astype(np.float64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    scores = np.tile(counts, (len(test_labels), 1))
    return evaluate(scores, test_labels, num_classes)


def random_baseline(train_labels, test_labels, num_classes: int, trials: int = 100, seed: int = 0) -> MetricsReport:
    """Predictions drawn from the training-label multinomial, averaged over trials.

    Each trial ranks classes by a weighted draw without replacement
    (Gumbel top-k), so the top-1 prediction follows the multinomial exactly.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    freq = np.bincount(train_labels, minlength=num_classes).astype(np.float64)
    logp = np.log(freq / freq.sum(), out=np.full(num_classes, -np.inf), where=freq > 0)
    rng = np.random.default_rng(seed)
    k5 = min(5, num_classes)
    n = len(test_labels)
    top1 = top5 = 0.0
    prec = np.zeros(num_classes)
    rec = np.zeros(num_classes)
    support = np.bincount(test_labels, minlength=num_classes)
    for _ in range(trials):
        keys = logp + rng.gumbel(size=(n, num_classes))
        ranked = np.argsort(-keys, axis=1, kind="stable")[:, :k5]
        top1 += np.mean(ranked[:, 0] == test_labels)
        top5 += np.mean((ranked == test_labels[:, None]).any(axis=1))
        p, r, _ = precision_recall_from_predictions(ranked[:, 0], test_labels, num_classes)
        prec += p
        rec += r
    prec /= trials
    rec /= trials
    present = support > 0
    return MetricsReport(top1 / trials, top5 / trials, prec, rec, float(prec[present].mean()),
                         float(rec[present].mean()), support)


# --------------------------------------------------------------------------- reports

REPORT_HEADER = ["scope", "method", "class", "top1", "top5", "precision", "recall", "support"]


def _f(v: float) -> str:
    return f"{float(v):.6f}"


def report_rows(method: str, report: MetricsReport, class_names: Sequence[str] | None = None) -> list[list[str]]:
    names = class_names or [str(i) for i in range(report.num_classes)]
    rows = [["aggregate", method, "all", _f(report.top1), _f(report.top5), _f(report.macro_precision),
             _f(report.macro_recall), str(int(report.support.sum()))]]
    for c in range(report.num_classes):
        rows.append(["class", method, names[c], "", "", _f(report.per_class_precision[c]),
                     _f(report.per_class_recall[c]), str(int(report.support[c]))])
    return rows


def write_report(path: str | Path, reports: Sequence[tuple[str, MetricsReport]],
                 class_names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for method, rep in reports:
            w.writerows(report_rows(method, rep, class_names))


def write_matrix(path: str | Path, matrix: np.ndarray, classes: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in classes])
        for c, row in zip(classes, matrix):
            w.writerow([str(c)] + [_f(v) for v in row])
