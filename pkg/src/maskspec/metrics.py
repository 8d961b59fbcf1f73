"""Ranking and classification metrics, plus k-fold orchestration."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class NoPositivesError(ValueError):
    """A class has no positive labels, so its average precision is undefined."""


def average_precision(scores, labels) -> float:
    """Non-interpolated average precision of one ranking.

    Items are ranked by descending score; ties keep their original order
    (stable sort), so an earlier item outranks a later one with equal score.
    The result is the mean, over positive items, of precision at that item's rank.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositivesError("no positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hits.sum() / n_pos)


def per_class_ap(scores, labels) -> np.ndarray:
    """AP for every column; classes without positives are NaN."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"expected matching (clips, classes) matrices, got {scores.shape} and {labels.shape}")
    out = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        try:
            out[c] = average_precision(scores[:, c], labels[:, c])
        except NoPositivesError:
            pass
    return out


def mean_ap(scores, labels) -> float:
    """Unweighted mean of per-class AP over classes that have positives."""
    aps = per_class_ap(scores, labels)
    valid = ~np.isnan(aps)
    if not valid.any():
        raise NoPositivesError("no class has a positive label")
    skipped = np.flatnonzero(~valid)
    if len(skipped):
        logger.warning("mAP skips %d class(es) with no positives: %s", len(skipped), skipped.tolist())
    return float(aps[valid].mean())


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    return float((preds == labels).mean())


def confusion_counts(preds, labels, num_classes: int) -> np.ndarray:
    """``counts[true, pred]``."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return counts


@dataclass
class KFoldResult:
    mean: float
    per_fold: dict[int, float]
    fold_sizes: dict[int, int]

    @property
    def std(self) -> float:
        return float(np.std(list(self.per_fold.values())))


def kfold_runner(
    records: Sequence[Mapping],
    callback: Callable[[list, list, int], float],
    k: int = 5,
) -> KFoldResult:
    """Hold out each fold ``1..k`` once; ``callback(train, held_out, fold)`` returns its metric."""
    folds = [r.get("fold") for r in records]
    sizes = Counter(folds)
    missing = [f for f in range(1, k + 1) if sizes.get(f, 0) == 0]
    stray = sorted({f for f in folds if f not in range(1, k + 1)}, key=str)
    if missing or stray:
        raise ValueError(f"manifest folds must cover 1..{k}: missing {missing}, unexpected {stray}")
    per_fold = {}
    for fold in range(1, k + 1):
        train = [r for r in records if r["fold"] != fold]
        held = [r for r in records if r["fold"] == fold]
        per_fold[fold] = float(callback(train, held, fold))
        logger.info("fold %d: %.4f", fold, per_fold[fold])
    return KFoldResult(float(np.mean(list(per_fold.values()))), per_fold, {f: sizes[f] for f in range(1, k + 1)})
