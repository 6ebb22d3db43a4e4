"""Type-prediction and line-ranking metrics.

Ranking metrics are defined per function over its valid lines, ranked by
descending vulnerable-class probability with ties going to the smaller
line number. Functions without any ground-truth vulnerable line are
excluded from ranking metrics (never scored as 0) and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ExcludedSample(ValueError):
    """The sample has no ground-truth vulnerable line."""


@dataclass
class RankedLines:
    ranking: list[int]  # line numbers, best first
    vulnerable: frozenset[int]

    @classmethod
    def from_scores(cls, scores: dict[int, float], vulnerable) -> "RankedLines":
        vulnerable = frozenset(vulnerable)
        unknown = vulnerable - set(scores)
        if unknown:
            raise ValueError(f"vulnerable lines {sorted(unknown)} are not valid lines")
        ranking = sorted(scores, key=lambda ln: (-scores[ln], ln))
        return cls(ranking, vulnerable)

    @classmethod
    def from_slots(cls, probs: np.ndarray, valid: np.ndarray, vulnerable) -> "RankedLines":
        """Line slot k holds line k + 1."""
        scores = {int(k) + 1: float(probs[k]) for k in np.flatnonzero(valid)}
        return cls.from_scores(scores, vulnerable)

    @property
    def n(self) -> int:
        return len(self.ranking)

    def _require_vulnerable(self):
        if not self.vulnerable:
            raise ExcludedSample("no vulnerable lines")


def accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if len(pred) != len(gold) or len(gold) == 0:
        raise ValueError("accuracy needs equal, non-zero lengths")
    return float(np.mean(pred == gold))


@dataclass
class ClassScores:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    predicted: list[int]
    zero_division: list[int]  # classes whose precision or recall had a 0 denominator
    macro_precision: float
    macro_recall: float
    macro_f1: float


def confusion_matrix(pred, gold, n_classes: int) -> np.ndarray:
    pred, gold = np.asarray(pred, dtype=np.int64), np.asarray(gold, dtype=np.int64)
    if pred.size and (pred.min() < 0 or gold.min() < 0 or pred.max() >= n_classes or gold.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def precision_recall_f1(pred, gold, n_classes: int) -> ClassScores:
    """Per-class P/R/F1 (0 on zero denominators, flagged) and macro means
    over the classes present in ``gold``."""
    cm = confusion_matrix(pred, gold, n_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    prec, rec, f1, flagged = [], [], [], []
    for c in range(n_classes):
        p = tp[c] / predicted[c] if predicted[c] else 0.0
        r = tp[c] / support[c] if support[c] else 0.0
        if not predicted[c] or not support[c]:
            flagged.append(c)
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    present = [c for c in range(n_classes) if support[c]]

    def macro(vals):
        return float(np.mean([vals[c] for c in present])) if present else 0.0

    return ClassScores(
        prec, rec, f1, support.tolist(), predicted.tolist(), flagged, macro(prec), macro(rec), macro(f1)
    )


def top_k_accuracy(rl: RankedLines, k: int) -> int:
    rl._require_vulnerable()
    return int(any(ln in rl.vulnerable for ln in rl.ranking[:k]))


def recall_at_20pct_loc(rl: RankedLines) -> float:
    rl._require_vulnerable()
    inspected = rl.ranking[: -(-rl.n // 5)]  # ceil(0.2 N) without float rounding
    return len(rl.vulnerable.intersection(inspected)) / len(rl.vulnerable)


def effort_at_20pct_recall(rl: RankedLines) -> float:
    rl._require_vulnerable()
    q = max(1, len(rl.vulnerable) // 5)
    found = 0
    for rank, ln in enumerate(rl.ranking, start=1):
        if ln in rl.vulnerable:
            found += 1
            if found == q:
                return rank / rl.n
    raise AssertionError("unreachable: vulnerable lines are a subset of the ranking")


def ifa(rl: RankedLines) -> int:
    rl._require_vulnerable()
    for k, ln in enumerate(rl.ranking):
        if ln in rl.vulnerable:
            return k
    raise AssertionError("unreachable: vulnerable lines are a subset of the ranking")


RANKING_KEYS = ("top1_acc", "top5_acc", "top10_acc", "recall_at_20loc", "effort_at_20recall", "ifa")


def ranking_metrics(rl: RankedLines) -> dict:
    return {
        "top1_acc": top_k_accuracy(rl, 1),
        "top5_acc": top_k_accuracy(rl, 5),
        "top10_acc": top_k_accuracy(rl, 10),
        "recall_at_20loc": recall_at_20pct_loc(rl),
        "effort_at_20recall": effort_at_20pct_recall(rl),
        "ifa": ifa(rl),
    }


@dataclass
class MetricReport:
    n_samples: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict
    top1_acc: float | None
    top5_acc: float | None
    top10_acc: float | None
    recall_at_20loc: float | None
    effort_at_20recall: float | None
    ifa: float | None
    n_line_scored: int
    excluded: dict = field(default_factory=dict)
    aggregation: str = "macro mean over functions with at least one surviving vulnerable line"

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "top1_acc": self.top1_acc,
            "top5_acc": self.top5_acc,
            "top10_acc": self.top10_acc,
            "recall_at_20loc": self.recall_at_20loc,
            "effort_at_20recall": self.effort_at_20recall,
            "ifa": self.ifa,
            "n_line_scored": self.n_line_scored,
            "excluded": dict(self.excluded),
            "aggregation": self.aggregation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Plain-text table in the usual column order."""
        cols = [
            ("Acc", self.accuracy),
            ("Prec", self.macro_precision),
            ("Rec", self.macro_recall),
            ("F1", self.macro_f1),
            ("Top-5 ACC", self.top5_acc),
            ("Top-10 ACC", self.top10_acc),
            ("R@20% LOC", self.recall_at_20loc),
            ("E@20% R", self.effort_at_20recall),
            ("IFA", self.ifa),
        ]
        head = " | ".join(f"{name:>10}" for name, _ in cols)
        row = " | ".join(f"{'n/a':>10}" if v is None else f"{v:>10.4f}" for _, v in cols)
        notes = ", ".join(f"{k}={v}" for k, v in sorted(self.excluded.items()))
        return f"{head}\n{row}\n(excluded from line metrics: {notes or 'none'})\n"


def aggregate_report(
    pred,
    gold,
    n_classes: int,
    line_results: list[dict | None],
    excluded: dict | None = None,
    class_names: list[str] | None = None,
) -> MetricReport:
    """Classification metrics over all samples plus the mean of each ranking
    metric over samples that had one (``None`` entries are excluded)."""
    scores = precision_recall_f1(pred, gold, n_classes)
    names = class_names or [str(c) for c in range(n_classes)]
    per_class = {
        names[c]: {
            "precision": scores.precision[c],
            "recall": scores.recall[c],
            "f1": scores.f1[c],
            "support": scores.support[c],
            "zero_division": c in scores.zero_division,
        }
        for c in range(n_classes)
        if scores.support[c] or scores.predicted[c]
    }
    scored = [r for r in line_results if r is not None]
    means = {k: (float(np.mean([r[k] for r in scored])) if scored else None) for k in RANKING_KEYS}
    return MetricReport(
        n_samples=len(gold),
        accuracy=accuracy(pred, gold),
        macro_precision=scores.macro_precision,
        macro_recall=scores.macro_recall,
        macro_f1=scores.macro_f1,
        per_class=per_class,
        n_line_scored=len(scored),
        excluded=dict(excluded or {}),
        **means,
    )


def evaluate_predictions(preds, n_classes: int, class_names: list[str] | None = None) -> MetricReport:
    """Build a report from :class:`~vulnmtl.training.Predictions`."""
    line_results = []
    excluded = {"no_vulnerable_lines": 0, "vulnerable_lines_truncated": 0}
    for probs, valid, vuln, orig in zip(preds.line_probs, preds.line_valid, preds.vuln_lines, preds.original_vuln_counts):
        if not vuln:
            excluded["vulnerable_lines_truncated" if orig else "no_vulnerable_lines"] += 1
            line_results.append(None)
            continue
        line_results.append(ranking_metrics(RankedLines.from_slots(probs, valid, vuln)))
    return aggregate_report(preds.pred, preds.labels, n_classes, line_results, excluded, class_names)
