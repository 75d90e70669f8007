"""Slide-level aggregation, IHC surrogate subtype rules and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyPatchSetError, InputError, UndefinedMetricError

SUBTYPES = ("luminal_a", "luminal_b", "her2_enriched", "basal_like")
UNCLASSIFIED = "unclassified"


@dataclass
class SlidePrediction:
    slide_id: str
    mean_probs: np.ndarray
    predicted_class: int
    n_patches_used: int


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float | None = None
    class_names: tuple[str, ...] = SUBTYPES

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "per_class": {
                name: {
                    "precision": float(self.per_class_precision[i]),
                    "recall": float(self.per_class_recall[i]),
                    "f1": float(self.per_class_f1[i]),
                }
                for i, name in enumerate(self.class_names)
            },
            "confusion": self.confusion.tolist(),
        }

    def to_table(self) -> str:
        """Human-readable table in Precision / Recall / F1 / Accuracy / AUC order."""
        rows = [f"{'Subtype':<16}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}"]
        for i, name in enumerate(self.class_names):
            rows.append(
                f"{name:<16}{self.per_class_precision[i]:>10.4f}"
                f"{self.per_class_recall[i]:>10.4f}{self.per_class_f1[i]:>10.4f}"
            )
        auc = f"{self.macro_auc:.4f}" if self.macro_auc is not None else "n/a"
        rows.append(
            f"{'Macro Avg':<16}{self.macro_precision:>10.4f}"
            f"{self.macro_recall:>10.4f}{self.macro_f1:>10.4f}"
        )
        rows.append(f"Accuracy: {self.accuracy:.4f}    AUC: {auc}")
        return "\n".join(rows)

    def write_confusion_csv(self, path: str | Path) -> None:
        lines = ["true\\pred," + ",".join(self.class_names)]
        for i, name in enumerate(self.class_names):
            lines.append(name + "," + ",".join(str(int(v)) for v in self.confusion[i]))
        Path(path).write_text("\n".join(lines) + "\n")


def aggregate_slide(
    patch_probs: Sequence[np.ndarray],
    slide_id: str = "",
) -> SlidePrediction:
    """Arithmetic mean of patch probability vectors; argmax with lowest-index ties."""
    if len(patch_probs) == 0:
        raise EmptyPatchSetError(f"slide {slide_id!r}: no patch probabilities to aggregate")
    probs = np.asarray(patch_probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError("patch_probs must be a list of equal-length vectors")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise DataError(f"slide {slide_id!r}: patch probabilities must sum to 1")
    mean = probs.mean(axis=0)
    return SlidePrediction(
        slide_id=slide_id,
        mean_probs=mean,
        predicted_class=int(mean.argmax()),
        n_patches_used=len(patch_probs),
    )


def evaluate_metrics(
    predictions: Sequence[int],
    true_labels: Sequence[int],
    n_classes: int | None = None,
    class_names: tuple[str, ...] | None = None,
) -> MetricsReport:
    """Confusion matrix, accuracy and macro precision/recall/F1 (without AUC).

    Macro averages run over classes present in truth or predictions.
    """
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(true_labels, dtype=int)
    if len(pred) == 0 or len(pred) != len(true):
        raise InputError("predictions and true_labels must be equal-length and nonempty")
    if n_classes is None:
        n_classes = int(max(pred.max(), true.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(true, pred):
        confusion[t, p] += 1

    tp = np.diag(confusion).astype(np.float64)
    pred_sum = confusion.sum(axis=0).astype(np.float64)
    true_sum = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_sum, out=np.zeros(n_classes), where=pred_sum > 0)
    recall = np.divide(tp, true_sum, out=np.zeros(n_classes), where=true_sum > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)

    present = np.array(sorted(set(true.tolist()) | set(pred.tolist())))
    if class_names is None:
        class_names = SUBTYPES if n_classes == len(SUBTYPES) else tuple(
            f"class_{i}" for i in range(n_classes)
        )
    return MetricsReport(
        confusion=confusion,
        accuracy=float(tp.sum() / confusion.sum()),
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        class_names=class_names,
    )


def _binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-based Mann-Whitney AUC with midrank tie handling."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(positives.sum())
    n_neg = len(scores) - n_pos
    rank_sum = ranks[positives].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_ovr_macro(
    slide_probs: np.ndarray,
    true_labels: Sequence[int],
) -> float:
    """Macro one-vs-rest AUC; classes without both positives and negatives are skipped."""
    probs = np.asarray(slide_probs, dtype=np.float64)
    true = np.asarray(true_labels, dtype=int)
    if probs.ndim != 2 or len(probs) != len(true):
        raise InputError("slide_probs must be (n_slides, n_classes) aligned with labels")
    aucs = []
    for c in range(probs.shape[1]):
        positives = true == c
        n_pos = int(positives.sum())
        if n_pos == 0 or n_pos == len(true):
            continue
        aucs.append(_binary_auc(probs[:, c], positives))
    if not aucs:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.mean(aucs))


@dataclass
class IHCRule:
    """One surrogate rule; None fields accept any marker value."""

    subtype: str
    er: bool | None
    pr: bool | None
    her2: bool | None
    ki67_high: bool | None

    def matches(self, er: bool, pr: bool, her2: bool, ki67_high: bool) -> bool:
        for want, got in (
            (self.er, er),
            (self.pr, pr),
            (self.her2, her2),
            (self.ki67_high, ki67_high),
        ):
            if want is not None and want != got:
                return False
        return True


def default_ihc_rules() -> list[IHCRule]:
    # LumB reads "HER2 +/-" as any HER2 with PR unconstrained.
    return [
        IHCRule("luminal_a", er=True, pr=True, her2=False, ki67_high=False),
        IHCRule("luminal_b", er=True, pr=None, her2=None, ki67_high=True),
        IHCRule("her2_enriched", er=False, pr=False, her2=True, ki67_high=True),
        IHCRule("basal_like", er=False, pr=False, her2=False, ki67_high=True),
    ]


def load_ihc_rules(path: str | Path) -> list[IHCRule]:
    data = json.loads(Path(path).read_text())
    return [
        IHCRule(
            subtype=entry["subtype"],
            er=entry.get("er"),
            pr=entry.get("pr"),
            her2=entry.get("her2"),
            ki67_high=entry.get("ki67_high"),
        )
        for entry in data
    ]


def ihc_subtype(
    er: bool | None,
    pr: bool | None,
    her2: bool | None,
    ki67_high: bool | None,
    rules: Sequence[IHCRule] | None = None,
) -> str:
    """First matching surrogate rule, or 'unclassified' when none applies."""
    markers = {"er": er, "pr": pr, "her2": her2, "ki67_high": ki67_high}
    missing = [k for k, v in markers.items() if v is None]
    if missing:
        raise InputError(f"missing IHC markers: {', '.join(missing)}")
    for rule in rules if rules is not None else default_ihc_rules():
        if rule.matches(er, pr, her2, ki67_high):
            return rule.subtype
    return UNCLASSIFIED
