"""Comparative analyses: matched-fraction precision, uniform-budget ablation, stop modes, multi-shot."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .metrics import MetricCurve, MetricPoint, decision_point
from .oslo import (LABEL_FLIP, AdvTrace, AttackConfig, Panel, SourceEnsemble, TargetOracle,
                   ValidationEnsemble, check_descending, infer_membership, multishot_decisions,
                   run_trajectories, stage_rule)


@dataclass
class ComparisonRow:
    attack: str
    param: float
    flagged: int
    flagged_fraction: float
    precision: Optional[float]
    fp_share: Optional[float]
    matched: bool = True


def _row(attack: str, param: float, flags: np.ndarray, is_member: np.ndarray, matched=True) -> ComparisonRow:
    p = decision_point(flags, is_member, param)
    fp = p.flagged - int((flags & is_member).sum())
    return ComparisonRow(attack, float(param), p.flagged, p.flagged_fraction, p.precision,
                         fp / p.flagged if p.flagged else None, matched)


def global_threshold_for_count(magnitudes: np.ndarray, count: int) -> Tuple[float, int]:
    """Threshold (member iff magnitude >= t) whose flagged count is nearest ``count``.

    Ties make some counts unreachable; among equally near candidates the
    larger threshold (fewer flags) wins.
    """
    mags = np.asarray(magnitudes, dtype=np.float64)
    cands = np.r_[np.unique(mags)[::-1], np.inf]
    best_t, best_c = np.inf, 0
    for t in cands:
        c = int((mags >= t).sum())
        if abs(c - count) < abs(best_c - count):
            best_t, best_c = float(t), c
    return best_t, best_c


def matched_fraction_comparison(
    oslo_flags: Dict[float, np.ndarray],
    magnitudes: np.ndarray,
    is_member,
    fraction: float = 0.15,
) -> List[ComparisonRow]:
    """OSLO (tau nearest ``fraction``) vs a global perturbation threshold flagging as many samples.

    ``oslo_flags`` maps tau to the single-shot member flags on the panel;
    ``magnitudes`` are per-sample perturbation sizes for the global rule.
    When ties keep every plain threshold more than one sample away from
    OSLO's count, the global rule flags exactly that count with a random
    tie-break at the boundary (see ``tie_broken_threshold_row``).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    is_member = np.asarray(is_member, dtype=bool)
    n = len(is_member)
    target = fraction * n
    tau = min(oslo_flags, key=lambda t: (abs(int(np.sum(oslo_flags[t])) - target), -t))
    flags = np.asarray(oslo_flags[tau], dtype=bool)
    k = int(flags.sum())
    mags = np.asarray(magnitudes, dtype=np.float64)
    thr, c = global_threshold_for_count(mags, k)
    if abs(c - k) <= 1:
        gflags = mags >= thr
        return [_row("oslo", tau, flags, is_member), _row("global-threshold", thr, gflags, is_member)]
    return [_row("oslo", tau, flags, is_member), tie_broken_threshold_row(mags, is_member, k)]


def tie_broken_threshold_row(magnitudes: np.ndarray, is_member: np.ndarray, count: int) -> ComparisonRow:
    """Global threshold flagging exactly ``count`` samples, ties at the boundary broken uniformly at random.

    Precision and FP share are expectations over the random tie-break, so
    they are exact rationals rather than one noisy draw.
    """
    mags = np.asarray(magnitudes, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    n = len(mags)
    if count <= 0:
        return ComparisonRow("global-threshold", float("inf"), 0, 0.0, None, None, True)
    boundary = float(np.sort(mags)[::-1][min(count, n) - 1])
    above = mags > boundary
    tied = mags == boundary
    take = min(count, n) - int(above.sum())
    tp = (above & is_member).sum() + take * (tied & is_member).sum() / tied.sum()
    k = min(count, n)
    prec = float(tp / k)
    return ComparisonRow("global-threshold", boundary, k, k / n, prec, 1.0 - prec, True)


def membership_signal_test(magnitudes, is_member) -> Tuple[float, float, float]:
    """(member mean, non-member mean, one-sided rank-sum p) for 'members need more perturbation'."""
    mags = np.asarray(magnitudes, dtype=np.float64)
    mem = np.asarray(is_member, dtype=bool)
    p = stats.ranksums(mags[mem], mags[~mem], alternative="greater").pvalue
    return float(mags[mem].mean()), float(mags[~mem].mean()), float(p)


# -- uniform-budget ablation -------------------------------------------------

def eps_to_stage(eps: float, cfg: AttackConfig) -> int:
    """Stage whose radius equals ``eps``; eps must lie on the stage grid."""
    k = eps * cfg.stages / cfg.eps_max
    kr = int(round(k))
    if abs(k - kr) > 1e-6 or not 0 <= kr <= cfg.stages:
        raise ValueError(f"eps {eps} is not a multiple of eps_max/stages within [0, eps_max]")
    return kr


def calibrate_uniform_grid(
    cal_images: np.ndarray,
    cal_labels: np.ndarray,
    g: SourceEnsemble,
    h: ValidationEnsemble,
    cfg: AttackConfig,
    seed: int = 0,
    coverage: float = 0.99,
) -> Tuple[int, int, int]:
    """(small, medium, large) stages: large is the first stage by which ``coverage`` of
    known non-members flip every validation model; medium and small halve it."""
    res = run_trajectories(cal_images, cal_labels, g, h, cfg, [LABEL_FLIP], seed)
    stops = np.array([t.stop_stage if not t.exhausted else cfg.stages for t in res[LABEL_FLIP]])
    large = int(np.ceil(np.quantile(stops, coverage, method="higher")))
    large = max(4, min(large, cfg.stages))
    return max(1, large // 4), max(1, large // 2), large


@dataclass
class AblationRow:
    eps: float
    stage: int
    tpr: Optional[float]
    fpr: Optional[float]
    queries: int


def uniform_budget_ablation(
    panel: Panel,
    f,
    g: SourceEnsemble,
    cfg: AttackConfig,
    eps_list: Sequence[float],
    seed: int = 0,
) -> List[AblationRow]:
    """Same perturbation budget for every sample, no validation models.

    One trajectory per sample follows the staged schedule without early
    stopping; the example at the end of stage ``eps * K / eps_max`` is the
    uniform-eps example. Member iff the target still predicts the label.
    """
    oracle = f if isinstance(f, TargetOracle) else TargetOracle(f)
    stages = [eps_to_stage(e, cfg) for e in eps_list]
    positive = sorted({s for s in stages if s > 0})
    res = run_trajectories(panel.images, panel.labels, g, None, cfg, [stage_rule(s) for s in positive], seed,
                           panel.ids) if positive else {}
    rows = []
    for eps, s in zip(eps_list, stages):
        start = oracle.queries
        if s == 0:
            flags = oracle.query(panel.images) == panel.labels
        else:
            flags = np.array([d.member for d in infer_membership(oracle, res[stage_rule(s)])])
        p = decision_point(flags, panel.is_member, eps)
        rows.append(AblationRow(float(eps), s, p.tpr, p.fpr, oracle.queries - start))
    return rows


# -- stopping modes and multi-shot -------------------------------------------

@dataclass
class StopModeRow:
    mode: str
    tpr: Optional[float]
    fpr: Optional[float]
    flagged: int
    mean_stop_stage: float


def stop_mode_rows(panel: Panel, traces_by_mode: Dict[str, Sequence[AdvTrace]], f,
                   flags_by_mode: Optional[Dict[str, np.ndarray]] = None) -> List[StopModeRow]:
    """(TPR, FPR) per stopping rule from archived traces.

    Modes with archived decisions in ``flags_by_mode`` cost no queries; the
    rest query the target once per sample.
    """
    oracle = f if isinstance(f, TargetOracle) else TargetOracle(f)
    flags_by_mode = flags_by_mode or {}
    rows = []
    for mode, traces in traces_by_mode.items():
        if mode in flags_by_mode:
            flags = np.asarray(flags_by_mode[mode], dtype=bool)
        else:
            flags = np.array([d.member for d in infer_membership(oracle, traces)])
        p = decision_point(flags, panel.is_member, 0.0)
        rows.append(StopModeRow(mode, p.tpr, p.fpr, p.flagged, float(np.mean([t.stop_stage for t in traces]))))
    return rows


def stop_mode_comparison(panel: Panel, f, g: SourceEnsemble, h: ValidationEnsemble, cfg: AttackConfig,
                         taus: Sequence[float], seed: int = 0) -> List[StopModeRow]:
    from .oslo import tau_rule
    rules = [tau_rule(t) for t in taus] + [LABEL_FLIP]
    res = run_trajectories(panel.images, panel.labels, g, h, cfg, rules, seed, panel.ids)
    modes = {f"tau={t:g}": res[tau_rule(t)] for t in taus}
    modes["label-flip"] = res[LABEL_FLIP]
    return stop_mode_rows(panel, modes, f)


@dataclass
class ShotRow:
    shots: int
    tau: float
    precision: Optional[float]
    recall: Optional[float]
    flagged: int


def multishot_study(panel: Panel, f, traces_by_tau: Dict[float, List[AdvTrace]], taus: Sequence[float],
                    max_shots: int = 3) -> List[ShotRow]:
    """PR points for 1..max_shots shots, each ending at every tau with enough predecessors."""
    check_descending(taus)
    if len(taus) < max_shots:
        raise ValueError("need at least max_shots taus")
    oracle = f if isinstance(f, TargetOracle) else TargetOracle(f)
    rows = []
    for shots in range(1, max_shots + 1):
        for end in range(shots - 1, len(taus)):
            use = list(taus[end - shots + 1:end + 1])
            dec = multishot_decisions(oracle, traces_by_tau, use, shots)
            flags = np.array([d.member for d in dec])
            p = decision_point(flags, panel.is_member, use[-1])
            rows.append(ShotRow(shots, use[-1], p.precision, p.recall, p.flagged))
    return rows


# -- rendering ---------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def rows_to_markdown(rows: Sequence, title: str = "") -> str:
    if not rows:
        return f"### {title}\n\n(no rows)\n" if title else "(no rows)\n"
    cols = list(asdict(rows[0]))
    lines = [f"### {title}", ""] if title else []
    lines.append("| " + " | ".join(cols) + " |")
    lines.append("|" + "---|" * len(cols))
    for r in rows:
        d = asdict(r)
        lines.append("| " + " | ".join(_cell(d[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: Sequence) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = list(asdict(rows[0]))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = asdict(r)
        w.writerow(["null" if d[c] is None else d[c] for c in cols])
    return buf.getvalue()
