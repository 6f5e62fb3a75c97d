"""Classification metrics: confusion-derived scores and rank-based AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .boosting import TreeEnsemble, predict_proba
from .errors import SingleClassError, ValidationError


@dataclass(frozen=True)
class EvalReport:
    f1_macro: float
    accuracy: float
    precision_macro: float
    recall_macro: float
    roc_auc: float
    confusion: tuple[tuple[int, int], tuple[int, int]]  # rows true, cols predicted

    def to_json(self) -> str:
        return json.dumps({
            "f1_macro": self.f1_macro,
            "accuracy": self.accuracy,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "roc_auc": self.roc_auc,
            "confusion": [list(r) for r in self.confusion],
        }, sort_keys=True, indent=2)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError("label vectors differ in length")
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    return ((tn, fp), (fn, tp))


def _per_class_prf(confusion):
    (tn, fp), (fn, tp) = confusion
    out = []
    for tp_c, fp_c, fn_c in ((tn, fn, fp), (tp, fp, fn)):   # class 0, class 1
        prec = tp_c / (tp_c + fp_c) if tp_c + fp_c else 0.0
        rec = tp_c / (tp_c + fn_c) if tp_c + fn_c else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


def macro_f1(y_true, y_pred) -> float:
    per_class = _per_class_prf(confusion_matrix(y_true, y_pred))
    return float(np.mean([f1 for _, _, f1 in per_class]))


def auc_score(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic; tied scores
    contribute half, which is the midrank convention."""
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[y_true == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(ensemble: TreeEnsemble, x: np.ndarray, y: np.ndarray,
             threshold: float = 0.5) -> EvalReport:
    """Score the ensemble with macro-averaged metrics over both classes."""
    y = np.asarray(y, dtype=np.int64)
    proba = predict_proba(ensemble, x)
    if len(np.unique(y)) < 2:
        raise SingleClassError("evaluation needs both classes present")
    pred = (proba >= threshold).astype(np.int64)
    confusion = confusion_matrix(y, pred)
    per_class = _per_class_prf(confusion)
    (tn, fp), (fn, tp) = confusion
    return EvalReport(
        f1_macro=float(np.mean([f for _, _, f in per_class])),
        accuracy=(tn + tp) / len(y),
        precision_macro=float(np.mean([p for p, _, _ in per_class])),
        recall_macro=float(np.mean([r for _, r, _ in per_class])),
        roc_auc=auc_score(y, proba),
        confusion=confusion,
    )


def roc_points(y_true: np.ndarray, scores: np.ndarray) -> list[tuple[float, float]]:
    """(FPR, TPR) at every distinct score threshold, for external plotting."""
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_y = y_true[order]
    sorted_s = scores[order]
    tps = np.cumsum(sorted_y)
    fps = np.cumsum(1 - sorted_y)
    distinct = np.append(sorted_s[1:] != sorted_s[:-1], True)
    points = [(0.0, 0.0)]
    points.extend(
        (float(fps[i]) / n_neg, float(tps[i]) / n_pos)
        for i in np.flatnonzero(distinct)
    )
    return points
