"""Patient-level evaluation: confusion metrics, ROC/AUC and 95% intervals.

COVID is the positive class throughout.  Metrics whose denominator is zero
are reported as ``None`` (``undefined`` in CSV output), never as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DimensionError, UsageError

Z95 = 1.959964
DEFAULT_CUTOFFS = (0.3, 0.4, 0.5, 0.6, 0.7)

Interval = tuple[float, float]


def _z(confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise UsageError(f"confidence must lie in (0, 1), got {confidence}")
    return Z95 if confidence == 0.95 else float(norm.ppf(0.5 + confidence / 2))


def _as_bool(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        return arr == "covid"
    return arr.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(preds, truths) -> ConfusionCounts:
    p, t = _as_bool(preds).reshape(-1), _as_bool(truths).reshape(-1)
    if p.shape != t.shape:
        raise DimensionError(f"{p.size} predictions for {t.size} truths")
    if p.size == 0:
        raise UsageError("confusion counts need at least one sample")
    return ConfusionCounts(
        int((p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum()), int((~p & t).sum())
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def point_metrics(c: ConfusionCounts) -> dict:
    return {
        "accuracy": _ratio(c.tp + c.tn, c.n),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
    }


def wilson_ci(successes: int, n: int, confidence: float = 0.95) -> Interval:
    """Wilson score interval for a binomial proportion, clamped to [0, 1]."""
    if n < 1:
        raise UsageError(f"Wilson interval needs n >= 1, got {n}")
    if not 0 <= successes <= n:
        raise UsageError(f"successes must lie in [0, {n}], got {successes}")
    z = _z(confidence)
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    # the bound at p = 0 or 1 is exact in theory but can miss by an ulp
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def _check_scores(scores, truths) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = _as_bool(truths).reshape(-1)
    if s.shape != t.shape:
        raise DimensionError(f"{s.size} scores for {t.size} truths")
    if t.all() or not t.any():
        raise UsageError("ROC analysis needs both classes among the truths")
    return s, t


def roc_auc(scores, truths) -> float:
    """Mann-Whitney AUC: (concordant pairs + half the ties) / (n_pos * n_neg)."""
    s, t = _check_scores(scores, truths)
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, truths) -> list[tuple[float, float, float]]:
    """``(threshold, fpr, tpr)`` at every distinct score, from ``(inf, 0, 0)`` down to ``(min, 1, 1)``."""
    s, t = _check_scores(scores, truths)
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    points = [(math.inf, 0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        hit = s >= thr
        points.append((float(thr), int((hit & ~t).sum()) / n_neg, int((hit & t).sum()) / n_pos))
    return points


def trapezoid_area(curve: Sequence[tuple[float, float, float]]) -> float:
    area = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(curve[:-1], curve[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def auc_ci(auc: float, n_pos: int, n_neg: int, confidence: float = 0.95) -> Interval:
    """Hanley-McNeil normal-approximation interval for an AUC, clamped to [0, 1]."""
    if n_pos < 1 or n_neg < 1:
        raise UsageError(f"AUC interval needs both class counts >= 1, got {n_pos}, {n_neg}")
    if not 0.0 <= auc <= 1.0:
        raise UsageError(f"AUC must lie in [0, 1], got {auc}")
    a = auc
    q1 = a / (2 - a)
    q2 = 2 * a * a / (1 + a)
    var = (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg)
    se = math.sqrt(max(var, 0.0))
    z = _z(confidence)
    return max(0.0, a - z * se), min(1.0, a + z * se)


@dataclass(frozen=True)
class CutoffRow:
    cutoff: float
    counts: ConfusionCounts
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy_ci: Optional[Interval]
    sensitivity_ci: Optional[Interval]
    specificity_ci: Optional[Interval]


@dataclass(frozen=True)
class EvaluationReport:
    rows: list
    auc: float
    auc_ci: Interval
    roc: list = field(default_factory=list)


def evaluate_cutoff(scores, truths, cutoff: float, confidence: float = 0.95) -> CutoffRow:
    s = np.asarray(scores, dtype=np.float64)
    c = confusion(s >= cutoff, truths)
    m = point_metrics(c)

    def ci(k, n):
        return wilson_ci(k, n, confidence) if n else None

    return CutoffRow(
        float(cutoff),
        c,
        m["accuracy"],
        m["sensitivity"],
        m["specificity"],
        ci(c.tp + c.tn, c.n),
        ci(c.tp, c.tp + c.fn),
        ci(c.tn, c.tn + c.fp),
    )


def cutoff_sweep(scores, truths, cutoffs: Sequence[float] = DEFAULT_CUTOFFS, confidence: float = 0.95) -> EvaluationReport:
    """One metrics row per cut-off (COVID iff score >= cut-off), plus AUC and its interval."""
    s, t = _check_scores(scores, truths)
    rows = [evaluate_cutoff(s, t, c, confidence) for c in sorted(cutoffs)]
    auc = roc_auc(s, t)
    return EvaluationReport(rows, auc, auc_ci(auc, int(t.sum()), int((~t).sum()), confidence), roc_curve(s, t))


# --------------------------------------------------------------------- file output
def _pct(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{100.0 * value:.1f}"


def _ci_pct(ci: Optional[Interval]) -> list[str]:
    return ["undefined", "undefined"] if ci is None else [_pct(ci[0]), _pct(ci[1])]


REPORT_HEADER = "cutoff,accuracy,acc_lo,acc_hi,sensitivity,sens_lo,sens_hi,specificity,spec_lo,spec_hi"


def report_csv(report: EvaluationReport) -> str:
    lines = [REPORT_HEADER]
    for r in report.rows:
        cells = [f"{r.cutoff:g}", _pct(r.accuracy), *_ci_pct(r.accuracy_ci)]
        cells += [_pct(r.sensitivity), *_ci_pct(r.sensitivity_ci)]
        cells += [_pct(r.specificity), *_ci_pct(r.specificity_ci)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def auc_txt(report: EvaluationReport) -> str:
    lo, hi = report.auc_ci
    return f"auc,lo,hi\n{report.auc:.6f},{lo:.6f},{hi:.6f}\n"


def roc_csv(curve: Sequence[tuple[float, float, float]]) -> str:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{thr!r},{fpr!r},{tpr!r}" for thr, fpr, tpr in curve]
    return "\n".join(lines) + "\n"
