"""Evaluation metrics with a low-FPR focus: ROC points, TPR@FPR, precision/recall, CDFs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats


class IntegrityError(RuntimeError):
    """Audited query counters disagree with what a run claims."""


@dataclass
class ScoredPanel:
    ids: np.ndarray
    scores: np.ndarray
    is_member: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_member = np.asarray(self.is_member, dtype=bool)
        if not (len(self.ids) == len(self.scores) == len(self.is_member)):
            raise ValueError("ids, scores and is_member must have equal length")

    @classmethod
    def from_scores(cls, scores, is_member) -> "ScoredPanel":
        return cls(np.arange(len(scores)), scores, is_member)


@dataclass
class MetricPoint:
    param: float
    tpr: Optional[float]
    fpr: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    flagged_fraction: float
    flagged: int = 0


@dataclass
class MetricCurve:
    points: List[MetricPoint] = field(default_factory=list)
    param_name: str = "threshold"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.param_name, "tpr", "fpr", "precision", "recall", "flagged_fraction"])
        for p in self.points:
            w.writerow([_fmt(p.param), _fmt(p.tpr), _fmt(p.fpr), _fmt(p.precision), _fmt(p.recall),
                        _fmt(p.flagged_fraction)])
        return buf.getvalue()

    def as_dicts(self) -> List[dict]:
        return [asdict(p) for p in self.points]


def _fmt(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v))


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def decision_point(flagged, is_member, param: float) -> MetricPoint:
    """Rates for one binary decision vector (True = flagged member)."""
    flagged = np.asarray(flagged, dtype=bool)
    is_member = np.asarray(is_member, dtype=bool)
    tp = int((flagged & is_member).sum())
    fp = int((flagged & ~is_member).sum())
    pos, neg = int(is_member.sum()), int((~is_member).sum())
    n = len(flagged)
    return MetricPoint(param=float(param), tpr=_ratio(tp, pos), fpr=_ratio(fp, neg),
                       precision=_ratio(tp, tp + fp), recall=_ratio(tp, pos),
                       flagged_fraction=(tp + fp) / n if n else 0.0, flagged=tp + fp)


def _check_two_classes(panel: ScoredPanel) -> None:
    if panel.is_member.all() or (~panel.is_member).all():
        raise ValueError("ROC undefined: panel needs at least one member and one non-member")


def roc_points(panel: ScoredPanel) -> MetricCurve:
    """One point per distinct threshold (score >= t flags member), plus t = +inf.

    Points are ordered by decreasing threshold, i.e. increasing FPR.
    """
    _check_two_classes(panel)
    s, m = panel.scores, panel.is_member
    order = np.argsort(-s, kind="stable")
    s_sorted, m_sorted = s[order], m[order]
    tp_cum = np.cumsum(m_sorted)
    fp_cum = np.cumsum(~m_sorted)
    # last index of each group of tied scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    pos, neg, n = int(m.sum()), int((~m).sum()), len(s)
    pts = [MetricPoint(float("inf"), 0.0, 0.0, None, 0.0, 0.0, 0)]
    for e in ends:
        tp, fp = int(tp_cum[e]), int(fp_cum[e])
        pts.append(MetricPoint(float(s_sorted[e]), tp / pos, fp / neg, tp / (tp + fp), tp / pos,
                               (tp + fp) / n, tp + fp))
    return MetricCurve(pts, "threshold")


def tpr_at_fpr(panel: ScoredPanel, fpr_cap: float) -> float:
    """Largest TPR among thresholds whose FPR does not exceed the cap."""
    if not 0.0 <= fpr_cap <= 1.0:
        raise ValueError("fpr_cap must be in [0, 1]")
    best = 0.0
    for p in roc_points(panel).points:
        if p.fpr <= fpr_cap + 1e-15:
            best = max(best, p.tpr)
    return best


def curve_tpr_at_fpr(curve: MetricCurve, fpr_cap: float) -> float:
    """Same rule applied to measured (non-interpolated) decision points, e.g. per-tau."""
    vals = [p.tpr for p in curve.points if p.fpr is not None and p.tpr is not None and p.fpr <= fpr_cap + 1e-15]
    return max(vals) if vals else 0.0


def max_precision_at_recall(curve: MetricCurve, min_recall: float = 0.01) -> Optional[float]:
    vals = [p.precision for p in curve.points
            if p.precision is not None and p.recall is not None and p.recall >= min_recall]
    return max(vals) if vals else None


def precision_recall(decisions, truth) -> Tuple[Optional[float], Optional[float]]:
    """(precision, recall); precision is None with no positives, recall None with no members."""
    p = decision_point(decisions, truth, 0.0)
    return p.precision, p.recall


@dataclass
class CdfTable:
    values: np.ndarray
    cumulative: np.ndarray

    def at(self, v: float) -> float:
        if len(self.values) == 0:
            return float("nan")
        k = np.searchsorted(self.values, v, side="right")
        return float(k / len(self.values))


def empirical_cdf(values) -> CdfTable:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return CdfTable(v, np.arange(1, len(v) + 1) / max(len(v), 1))


def perturbation_cdf(magnitudes, is_member) -> Tuple[CdfTable, CdfTable]:
    """Empirical CDFs of perturbation magnitude for (members, non-members)."""
    mags = np.asarray(magnitudes, dtype=np.float64)
    mem = np.asarray(is_member, dtype=bool)
    if len(mags) == 0:
        raise ValueError("empty trace archive")
    return empirical_cdf(mags[mem]), empirical_cdf(mags[~mem])


def binomial_ci(successes: int, trials: int, level: float = 0.95) -> Tuple[float, float]:
    """Clopper-Pearson interval."""
    if trials == 0:
        return 0.0, 1.0
    a = (1 - level) / 2
    lo = 0.0 if successes == 0 else float(stats.beta.ppf(a, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(stats.beta.ppf(1 - a, successes + 1, trials - successes))
    return lo, hi


@dataclass
class QueryRecord:
    attack: str
    queries: int
    samples: int
    shots: int = 1
    budget_per_sample: Optional[int] = None


def query_report(records: Iterable[QueryRecord]) -> Dict[str, int]:
    """Per-attack query totals; enforces the one-query-per-shot contract for OSLO."""
    totals: Dict[str, int] = {}
    for r in records:
        if r.attack.lower().startswith("oslo") and r.queries != r.samples * r.shots:
            raise IntegrityError(f"{r.attack}: {r.queries} queries for {r.samples} samples x {r.shots} shots")
        if r.budget_per_sample is not None and r.queries > r.budget_per_sample * r.samples:
            raise IntegrityError(f"{r.attack}: {r.queries} queries exceed budget {r.budget_per_sample} x {r.samples}")
        totals[r.attack] = totals.get(r.attack, 0) + r.queries
    return totals
