"""Leakage-safe stratified group folds and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .errors import HistopipeError
from .patches import CLASSES, DatasetManifest
from .seeding import derive_seed

#: Classes counted as carcinoma when binarizing.
CARCINOMA_CLASSES = ("in_situ", "invasive")


class TooFewImagesPerClass(HistopipeError):
    pass


class EmptyRecords(HistopipeError):
    pass


class EmptyValues(HistopipeError):
    pass


class SingleClassRecords(HistopipeError):
    pass


@dataclass
class FoldAssignment:
    """Image-level fold map; all descriptors of an image share its fold."""

    k: int
    fold_of: dict[str, int]

    def images_in_fold(self, fold: int) -> list[str]:
        return [i for i, f in self.fold_of.items() if f == fold]

    def to_json(self) -> dict:
        return {"k": self.k, "fold_of": dict(sorted(self.fold_of.items()))}

    @classmethod
    def from_json(cls, payload: dict) -> "FoldAssignment":
        return cls(k=int(payload["k"]), fold_of={k: int(v) for k, v in payload["fold_of"].items()})


@dataclass
class PredictionRecord:
    image_id: str
    true_label: str
    proba: np.ndarray
    predicted_label: str = ""

    def __post_init__(self):
        self.proba = np.asarray(self.proba, dtype=np.float64)
        if self.proba.shape != (len(CLASSES),):
            raise ValueError(f"proba must have {len(CLASSES)} entries")
        if abs(self.proba.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")
        if not self.predicted_label:
            # argmax with ties toward the lowest class index
            self.predicted_label = CLASSES[int(np.argmax(self.proba))]


@dataclass
class BinaryRecord:
    image_id: str
    positive: bool  # ground truth: carcinoma
    score: float  # summed carcinoma probability


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = ground truth, columns = predictions

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)


@dataclass
class RocCurve:
    points: list[tuple[float, float, float]]  # (fpr, tpr, threshold), thresholds descending
    auc: float
    n_positive: int = 0
    n_negative: int = 0


def stratified_group_kfold(manifest: DatasetManifest, k: int, seed: int = 0) -> FoldAssignment:
    """Assign whole images to folds, preserving class balance.

    Within each class, image ids are ordered by a seeded hash and dealt
    round-robin, so per-class fold counts differ by at most one and the
    assignment depends only on (image ids, k, seed), never on manifest
    order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    by_class: dict[str, list[str]] = {c: [] for c in CLASSES}
    for rec in manifest.records:
        by_class[rec.label].append(rec.image_id)
    fold_of: dict[str, int] = {}
    for label in CLASSES:
        ids = by_class[label]
        if not ids:
            continue
        if len(ids) < k:
            raise TooFewImagesPerClass(
                f"class {label!r} has {len(ids)} images, need at least {k}"
            )
        ordered = sorted(ids, key=lambda i: (derive_seed(seed, "fold", i), i))
        for pos, image_id in enumerate(ordered):
            fold_of[image_id] = pos % k
    return FoldAssignment(k=k, fold_of=fold_of)


def verify_group_leakage(
    folds: FoldAssignment, eval_fold: int, training_image_ids
) -> list[str]:
    """Image ids illegally present in the training set of a fold's models."""
    return sorted(
        i for i in training_image_ids if folds.fold_of.get(i, -1) == eval_fold
    )


def accuracy(records: list[PredictionRecord]) -> float:
    """Percent of records whose predicted label matches ground truth."""
    if not records:
        raise EmptyRecords("no prediction records")
    correct = sum(1 for r in records if r.predicted_label == r.true_label)
    return 100.0 * correct / len(records)


def round_1dp(value: float) -> float:
    """Round to one decimal on the exact decimal value (half to even).

    float repr gives the shortest decimal that round-trips, so 84.15
    rounds to 84.2 and 87.25 to 87.2, matching how the reference results
    table was produced; naive binary-float rounding does not.
    """
    return float(Decimal(repr(float(value))).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN))


def mean_std_raw(values) -> tuple[float, float]:
    """Arithmetic mean and population (divisor N) standard deviation."""
    if len(values) == 0:
        raise EmptyValues("no values to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate_mean_std(values) -> tuple[float, float]:
    """Mean and population std of per-fold accuracies, at report precision (1dp)."""
    mean, std = mean_std_raw(values)
    return round_1dp(mean), round_1dp(std)


def confusion_matrix(records: list[PredictionRecord]) -> ConfusionMatrix:
    if not records:
        raise EmptyRecords("no prediction records")
    counts = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    index = {c: i for i, c in enumerate(CLASSES)}
    for r in records:
        counts[index[r.true_label], index[r.predicted_label]] += 1
    return ConfusionMatrix(counts=counts)


def binarize_carcinoma(records: list[PredictionRecord]) -> list[BinaryRecord]:
    """Collapse to carcinoma-vs-not; score = in_situ + invasive probability."""
    carcinoma_idx = [CLASSES.index(c) for c in CARCINOMA_CLASSES]
    return [
        BinaryRecord(
            image_id=r.image_id,
            positive=r.true_label in CARCINOMA_CLASSES,
            score=float(r.proba[carcinoma_idx].sum()),
        )
        for r in records
    ]


def roc_curve(records: list[BinaryRecord]) -> RocCurve:
    """Threshold sweep over distinct scores; AUC by the trapezoidal rule.

    Tied scores collapse into one sweep step (a diagonal segment), which
    makes the trapezoidal area equal the Mann-Whitney statistic with ties
    counted one half.
    """
    if not records:
        raise EmptyRecords("no binary records")
    n_pos = sum(1 for r in records if r.positive)
    n_neg = len(records) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassRecords("ROC needs both classes present")

    scores = np.array([r.score for r in records])
    labels = np.array([r.positive for r in records])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]

    points: list[tuple[float, float, float]] = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[j] == scores[i]:
            tp += bool(labels[j])
            fp += not labels[j]
            j += 1
        points.append((fp / n_neg, tp / n_pos, float(scores[i])))
        i = j

    auc = 0.0
    for (fpr0, tpr0, _), (fpr1, tpr1, _) in zip(points, points[1:]):
        auc += (fpr1 - fpr0) * (tpr1 + tpr0) / 2.0
    return RocCurve(points=points, auc=auc, n_positive=n_pos, n_negative=n_neg)


def operating_point(curve: RocCurve, threshold: float) -> tuple[float, float]:
    """(sensitivity%, specificity%) when score >= threshold means positive."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    chosen = (0.0, 0.0)  # no score reaches the threshold: predict all negative
    for fpr, tpr, t in curve.points:
        if t >= threshold:
            chosen = (fpr, tpr)
        else:
            break
    fpr, tpr = chosen
    return 100.0 * tpr, 100.0 * (1.0 - fpr)
