"""Accumulated confusion matrix and the F1 / overall-accuracy scores derived from it.

Class order follows the ISPRS legend; the last index is the background
(clutter). Precision, recall and per-class F1 average over the foreground
classes only. ``oa`` divides foreground true positives by *all* pixels,
background included, so a scene that is half clutter scores at most 0.5;
``all_class_accuracy`` is the ordinary diagonal-over-total figure.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .errors import DataError, GraphStateError

CLASS_NAMES = ("imp_surf", "building", "low_veg", "tree", "car", "clutter")


class ConfusionMatrix:
    """counts[t, p] = number of pixels with truth ``t`` predicted as ``p``."""

    def __init__(self, num_classes: int = 6):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise DataError(f"truth shape {truth.shape} differs from prediction shape {pred.shape}")
        for name, arr in (("truth", truth), ("pred", pred)):
            bad = (arr < 0) | (arr >= self.num_classes)
            if bad.any():
                pos = tuple(int(i) for i in np.argwhere(bad)[0])
                raise DataError(f"{name} label {arr[pos]} at position {pos} outside [0, {self.num_classes - 1}]")
        k = self.num_classes
        idx = truth.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    f1: float
    oa: float
    per_class_f1: tuple[float, ...]
    all_class_accuracy: float

    @property
    def mean_f1(self) -> float:
        """Mean of the per-class F1 scores (as opposed to the macro ``f1``)."""
        return float(np.mean(self.per_class_f1))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def macro_scores(cm: ConfusionMatrix) -> Scores:
    """Scores over the foreground classes; empty classes contribute 0."""
    n = cm.total
    if n == 0:
        raise GraphStateError("confusion matrix is empty")
    counts = cm.counts
    k = cm.num_classes - 1
    diag = np.diag(counts)
    tp = diag[:k].astype(np.float64)
    fp = counts.sum(axis=0)[:k] - tp
    fn = counts.sum(axis=1)[:k] - tp
    precision = float(_ratio(tp, tp + fp).sum() / k)
    recall = float(_ratio(tp, tp + fn).sum() / k)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    per_class = _ratio(2 * tp, 2 * tp + fp + fn)
    return Scores(
        precision=precision,
        recall=recall,
        f1=f1,
        oa=float(tp.sum() / n),
        per_class_f1=tuple(float(v) for v in per_class),
        all_class_accuracy=float(diag.sum() / n),
    )


def fmt4(value: float) -> str:
    """Four decimals, ties to even on the shortest decimal representation."""
    q = Decimal(repr(float(value))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN)
    return str(q.copy_abs() if q.is_zero() else q)


def _footer(scores: Scores) -> list[tuple[str, float]]:
    return [
        ("precision", scores.precision),
        ("recall", scores.recall),
        ("mean_f1", scores.mean_f1),
        ("oa", scores.oa),
        ("macro_f1", scores.f1),
        ("all_class_accuracy", scores.all_class_accuracy),
    ]


def report_csv(scores: Scores, class_names=CLASS_NAMES) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "f1"])
    for name, v in zip(class_names, scores.per_class_f1):
        writer.writerow([name, fmt4(v)])
    for name, v in _footer(scores):
        writer.writerow([name, fmt4(v)])
    return buf.getvalue()


def report_table(scores: Scores, class_names=CLASS_NAMES) -> str:
    rows = [(name, fmt4(v)) for name, v in zip(class_names, scores.per_class_f1)]
    rows.append(("", ""))
    rows.extend((name, fmt4(v)) for name, v in _footer(scores))
    width = max(len(r[0]) for r in rows + [("class", "")])
    lines = [f"{'class':<{width}}  {'f1':>6}", "-" * (width + 8)]
    for name, val in rows:
        lines.append(f"{name:<{width}}  {val:>6}" if name else "")
    return "\n".join(lines) + "\n"


def resolution_label(factor: float) -> str:
    return "original" if factor == 1.0 else f"{factor!r}x"


def table_row(results: dict[float, Scores], method: str = "model") -> tuple[list[str], list[str]]:
    """Header and values for one comparison row: mean F1 per factor, OA per factor, then both means."""
    factors = list(results)
    labels = [resolution_label(f) for f in factors]
    f1s = [results[f].mean_f1 for f in factors]
    oas = [results[f].oa for f in factors]
    header = (["method"] + [f"f1_{lab}" for lab in labels] + [f"oa_{lab}" for lab in labels]
              + ["mean_f1", "mean_oa"])
    row = [method] + [fmt4(v) for v in f1s + oas] + [fmt4(float(np.mean(f1s))), fmt4(float(np.mean(oas)))]
    return header, row


def multi_resolution_rows(results: dict[float, Scores], method: str = "model") -> str:
    header, row = table_row(results, method)
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(line, widths)))
                     for line in (header, row)) + "\n"


def multi_resolution_csv(results: dict[float, Scores], method: str = "model") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(table_row(results, method))
    return buf.getvalue()


def secant_csv(results: dict[float, Scores]) -> str:
    """Factor vs OA, plus the secant slope from full resolution to each factor."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["factor", "oa", "mean_f1", "secant_from_original"])
    base = results.get(1.0)
    for f, s in results.items():
        slope = "" if base is None or f == 1.0 else fmt4((s.oa - base.oa) / (f - 1.0))
        writer.writerow([repr(f), fmt4(s.oa), fmt4(s.mean_f1), slope])
    return buf.getvalue()
