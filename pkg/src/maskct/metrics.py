"""Multi-label evaluation: confusion counts, CP/CR/CF1 and OP/OR/OF1.

OP and OR use a match indicator that counts agreement on negatives as well
as positives, so OR is not bounded by 1 when the truth has few positives.
Standard micro precision/recall are reported alongside.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable

import numpy as np

log = logging.getLogger(__name__)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.int64)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ConfusionCounts":
        return cls(*(np.zeros(k, dtype=np.int64) for _ in range(4)))

    @property
    def samples(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    __add__ = merge


def accumulate(truth, pred, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add one sample (``(K,)``) or a batch (``(n, K)``) to ``counts``."""
    t = np.atleast_2d(np.asarray(truth, dtype=np.int64))
    p = np.atleast_2d(np.asarray(pred, dtype=np.int64))
    if t.shape != p.shape:
        raise ValueError(f"truth {t.shape} and prediction {p.shape} shapes differ")
    new = ConfusionCounts(
        ((t == 1) & (p == 1)).sum(0),
        ((t == 0) & (p == 1)).sum(0),
        ((t == 1) & (p == 0)).sum(0),
        ((t == 0) & (p == 0)).sum(0),
    )
    return new if counts is None else counts.merge(new)


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(int(num), int(den)) if den else Fraction(0)


def class_precision_recall(counts: ConfusionCounts) -> tuple[list[Fraction], list[Fraction]]:
    """Per-class precision and recall; an empty denominator gives 0."""
    prec = [_ratio(tp, tp + fp) for tp, fp in zip(counts.tp, counts.fp)]
    rec = [_ratio(tp, tp + fn) for tp, fn in zip(counts.tp, counts.fn)]
    empty = [i for i, (tp, fp, fn) in enumerate(zip(counts.tp, counts.fp, counts.fn)) if tp + fp == 0 or tp + fn == 0]
    if empty:
        log.debug("zero denominators for classes %s, reported as 0", empty)
    return prec, rec


def _harmonic(a: Fraction | None, b: Fraction | None) -> Fraction | None:
    if a is None or b is None:
        return None
    return 2 * a * b / (a + b) if a + b else Fraction(0)


def aggregate_exact(truth, pred, class_average: str = "macro") -> dict[str, Any]:
    """Every metric as an exact ``Fraction`` (``None`` where undefined).

    ``class_average="per_entry"`` averages precision/recall over every
    (sample, class) cell instead of over classes.
    """
    t = np.atleast_2d(np.asarray(truth, dtype=np.int64))
    p = np.atleast_2d(np.asarray(pred, dtype=np.int64))
    if t.shape != p.shape:
        raise ValueError(f"truth {t.shape} and prediction {p.shape} shapes differ")
    n, k = t.shape
    if n == 0:
        raise ValueError("no samples")
    counts = accumulate(t, p)
    prec, rec = class_precision_recall(counts)

    if class_average == "macro":
        cp = sum(prec, Fraction(0)) / k
        cr = sum(rec, Fraction(0)) / k
    elif class_average == "per_entry":
        # a single cell's precision and recall are both 1 on a true positive, else 0
        cp = cr = Fraction(int(counts.tp.sum()), n * k)
    else:
        raise ValueError(f"unknown class_average {class_average!r}")

    matches = int((t == p).sum())
    positives = int(t.sum())
    op = Fraction(matches, n * k)
    orec = Fraction(matches, positives) if positives else None

    tp_all = int(counts.tp.sum())
    fp_all = int(counts.fp.sum())
    fn_all = int(counts.fn.sum())
    return {
        "per_class_precision": prec,
        "per_class_recall": rec,
        "CP": cp,
        "CR": cr,
        "CF1": _harmonic(cp, cr),
        "OP": op,
        "OR": orec,
        "OF1": _harmonic(op, orec),
        "micro_precision": _ratio(tp_all, tp_all + fp_all),
        "micro_recall": _ratio(tp_all, tp_all + fn_all),
        "samples": n,
        "classes": k,
        "counts": counts,
    }


def _f(x: Fraction | None) -> float | None:
    return None if x is None else float(x)


@dataclass
class MetricsReport:
    per_class_precision: list[float]
    per_class_recall: list[float]
    CP: float
    CR: float
    CF1: float
    OP: float
    OR: float | None
    OF1: float | None
    micro_precision: float
    micro_recall: float
    samples: int
    classes: int
    threshold: float
    class_names: list[str] = field(default_factory=list)
    dataset: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "samples": self.samples,
            "classes": self.classes,
            "class_names": list(self.class_names),
            "threshold": self.threshold,
            "CP": self.CP,
            "CR": self.CR,
            "CF1": self.CF1,
            "OP": self.OP,
            "OR": self.OR,
            "OF1": self.OF1,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "per_class_precision": list(self.per_class_precision),
            "per_class_recall": list(self.per_class_recall),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricsReport":
        return cls(**d)


def aggregate(
    truth,
    pred,
    threshold: float = 0.5,
    class_names: Iterable[str] = (),
    class_average: str = "macro",
    dataset: str = "",
) -> MetricsReport:
    ex = aggregate_exact(truth, pred, class_average)
    return MetricsReport(
        per_class_precision=[float(v) for v in ex["per_class_precision"]],
        per_class_recall=[float(v) for v in ex["per_class_recall"]],
        CP=float(ex["CP"]),
        CR=float(ex["CR"]),
        CF1=float(ex["CF1"]),
        OP=float(ex["OP"]),
        OR=_f(ex["OR"]),
        OF1=_f(ex["OF1"]),
        micro_precision=float(ex["micro_precision"]),
        micro_recall=float(ex["micro_recall"]),
        samples=ex["samples"],
        classes=ex["classes"],
        threshold=threshold,
        class_names=list(class_names),
        dataset=dataset,
    )


def report_emit(report: MetricsReport) -> str:
    """Stable JSON: fixed key order, undefined values as ``null``."""
    return json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"
