"""Evaluation metrics: accuracy, macro F1, per-case accuracy (with and without
dispatch), confusion matrix, and one-vs-all macro ROC/AUC."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dispatch import DEFAULT_THRESHOLD, CaseProbabilities, dispatch_case


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == truth))


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    truth, pred = np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall, F1.  A zero denominator yields 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    precision = _safe_ratio(tp, cm.sum(axis=0))
    recall = _safe_ratio(tp, cm.sum(axis=1))
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1


def f1_macro(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError("f1_macro needs a square confusion matrix with at least 2 classes")
    return float(per_class_prf(cm)[2].mean())


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())  # population std


def acc_per_case(preds_by_case: Mapping, truths_by_case: Mapping) -> tuple[float, float]:
    if not preds_by_case:
        raise ValueError("no cases to evaluate")
    accs = []
    for cid, pred in preds_by_case.items():
        truth = truths_by_case[cid]
        if len(truth) == 0:
            raise ValueError(f"case {cid} is empty")
        accs.append(accuracy(pred, truth))
    return _mean_std(accs)


def dispatched_labels(probs_by_case: Mapping, th: float = DEFAULT_THRESHOLD) -> dict:
    out = {}
    for cid, probs in probs_by_case.items():
        cp = probs if isinstance(probs, CaseProbabilities) else CaseProbabilities(str(cid), probs)
        out[cid] = dispatch_case(cp, th).labels()
    return out


def acc_per_case_d(probs_by_case: Mapping, truths_by_case: Mapping, th: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    return acc_per_case(dispatched_labels(probs_by_case, th), truths_by_case)


def roc_curve(scores, positives) -> tuple[np.ndarray, np.ndarray]:
    """FPR/TPR from a descending threshold sweep; tied scores enter together."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    return fpr, tpr


def auc_trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc_macro(scores, truth) -> float:
    """Macro one-vs-all AUC.  1-D scores are treated as the positive-class score of a binary task."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=np.int64)
    if s.ndim == 1:
        return auc_trapezoid(*roc_curve(s, t == 1))
    aucs = []
    for k in range(s.shape[1]):
        pos = t == k
        if pos.all() or not pos.any():
            if pos.all():
                raise ValueError("degenerate truth: every sample belongs to one class")
            warnings.warn(f"class {k} has no positive samples; skipped in macro AUC", stacklevel=2)
            continue
        aucs.append(auc_trapezoid(*roc_curve(s[:, k], pos)))
    if not aucs:
        raise ValueError("no class could be evaluated")
    return float(np.mean(aucs))


def macro_roc_curve(scores, truth, grid_points: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """TPR averaged over classes on a common FPR grid, for external plotting."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=np.int64)
    grid = np.linspace(0.0, 1.0, grid_points)
    curves = []
    for k in range(s.shape[1]):
        pos = t == k
        if pos.any() and not pos.all():
            fpr, tpr = roc_curve(s[:, k], pos)
            curves.append(np.interp(grid, fpr, tpr))
    return grid, np.mean(curves, axis=0)


@dataclass
class EvaluationReport:
    n_samples: int
    acc: float
    f1_macro: float
    acc_per_case_mean: float
    acc_per_case_std: float
    auc_macro: float
    polarity_acc: float
    polarity_f1_macro: float
    acc_per_case_d_mean: float | None = None
    acc_per_case_d_std: float | None = None
    per_class: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_confusion_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            n = len(self.confusion)
            w.writerow(["true\\pred"] + list(range(n)))
            for i, row in enumerate(self.confusion):
                w.writerow([i] + list(row))

    def text_table(self) -> str:
        lines = [
            f"samples                {self.n_samples}",
            f"type accuracy          {100 * self.acc:6.2f}%",
            f"type macro F1          {100 * self.f1_macro:6.2f}%",
            f"acc per case           {100 * self.acc_per_case_mean:6.2f} ± {100 * self.acc_per_case_std:.2f}%",
        ]
        if self.acc_per_case_d_mean is not None:
            lines.append(f"acc per case-D         {100 * self.acc_per_case_d_mean:6.2f} ± {100 * self.acc_per_case_d_std:.2f}%")
        lines += [
            f"type macro AUC         {self.auc_macro:.4f}",
            f"polarity accuracy      {100 * self.polarity_acc:6.2f}%",
            f"polarity macro F1      {100 * self.polarity_f1_macro:6.2f}%",
            "",
            "class  precision  recall  F1",
        ]
        for name, row in self.per_class.items():
            lines.append(f"{name:>5}  {row['precision']:9.4f}  {row['recall']:6.4f}  {row['f1']:.4f}")
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_samples", "acc", "f1_macro", "acc_per_case_mean", "acc_per_case_std", "auc_macro",
                 "polarity_acc", "polarity_f1_macro", "acc_per_case_d_mean", "acc_per_case_d_std",
                 "per_class", "confusion"],
    "properties": {
        "n_samples": {"type": "integer", "minimum": 1},
        "acc": {"type": "number", "minimum": 0, "maximum": 1},
        "f1_macro": {"type": "number", "minimum": 0, "maximum": 1},
        "acc_per_case_mean": {"type": "number", "minimum": 0, "maximum": 1},
        "acc_per_case_std": {"type": "number", "minimum": 0},
        "auc_macro": {"type": "number", "minimum": 0, "maximum": 1},
        "polarity_acc": {"type": "number", "minimum": 0, "maximum": 1},
        "polarity_f1_macro": {"type": "number", "minimum": 0, "maximum": 1},
        "acc_per_case_d_mean": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "acc_per_case_d_std": {"type": ["number", "null"], "minimum": 0},
        "per_class": {"type": "object"},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
    },
}


def evaluate(type_probs: np.ndarray, type_truth, pol_probs: np.ndarray, pol_truth, case_ids,
             dispatch: bool = True, th: float = DEFAULT_THRESHOLD) -> EvaluationReport:
    """Full report from per-sample probabilities grouped by ``case_ids``."""
    from .dispatch import N_TYPES, TYPE_NAMES

    type_probs = np.asarray(type_probs, dtype=np.float64)
    type_truth = np.asarray(type_truth, dtype=np.int64)
    pol_truth = np.asarray(pol_truth, dtype=np.int64)
    case_ids = np.asarray(case_ids)
    pred = type_probs.argmax(axis=1)
    pol_pred = np.asarray(pol_probs).argmax(axis=1)
    cm = confusion_matrix(type_truth, pred, N_TYPES)
    precision, recall, f1 = per_class_prf(cm)

    preds_by_case, truths_by_case, probs_by_case = {}, {}, {}
    for cid in dict.fromkeys(case_ids.tolist()):
        idx = np.flatnonzero(case_ids == cid)
        preds_by_case[cid] = pred[idx]
        truths_by_case[cid] = type_truth[idx]
        # renormalize against float32 rounding before the strict row-sum check
        rows = type_probs[idx]
        probs_by_case[cid] = CaseProbabilities(str(cid), rows / rows.sum(axis=1, keepdims=True))
    apc = acc_per_case(preds_by_case, truths_by_case)
    apcd = acc_per_case_d(probs_by_case, truths_by_case, th) if dispatch else (None, None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        auc = roc_auc_macro(type_probs, type_truth)

    return EvaluationReport(
        n_samples=int(type_truth.size),
        acc=accuracy(pred, type_truth),
        f1_macro=f1_macro(cm),
        acc_per_case_mean=apc[0],
        acc_per_case_std=apc[1],
        auc_macro=auc,
        polarity_acc=accuracy(pol_pred, pol_truth),
        polarity_f1_macro=f1_macro(confusion_matrix(pol_truth, pol_pred, 2)),
        acc_per_case_d_mean=apcd[0],
        acc_per_case_d_std=apcd[1],
        per_class={TYPE_NAMES[k]: {"precision": float(precision[k]), "recall": float(recall[k]), "f1": float(f1[k])}
                   for k in range(N_TYPES)},
        confusion=cm.tolist(),
    )
