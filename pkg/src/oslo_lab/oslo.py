"""One-shot label-only membership inference.

A sample's adversarial example is grown in ``stages`` sub-procedures whose
L-inf radius increases by ``eps_max / stages`` each time; validation models
decide when the perturbation is just large enough to fool a model that never
saw the sample. The target is then queried exactly once: if it still predicts
the true label, the sample is flagged as a member.

Because the perturbation trajectory does not depend on the stopping
threshold, one pass over a batch records the stopping point for every
requested rule at once (several taus, label flip, target flip search).
"""

from __future__ import annotations

import json
import multiprocessing
import os
import threading
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from . import models as M
from .metrics import MetricCurve, decision_point
from .transfer import (AdmixPool, AttackState, SourceEnsemble, TransferMethodParams,
                       effective_gradient, fgsm_step)

VALIDATION_RULES = ("all-below", "mean-below")
STOP_MODES = ("tau-threshold", "label-flip")
CALIBRATION_GRID = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001)


@dataclass(frozen=True)
class AttackConfig:
    stages: int = 80
    iterations: int = 10
    alpha: float = 1 / 255
    eps_max: float = 80 / 255
    tau: float = 0.01
    methods: TransferMethodParams = TransferMethodParams()
    validation_rule: str = "all-below"
    stop_mode: str = "tau-threshold"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 < self.eps_max <= 1:
            raise ValueError("eps_max must be in (0, 1]")
        if self.stages < 1 or self.iterations < 1:
            raise ValueError("stages and iterations must be >= 1")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must be in [0, 1]")
        if self.validation_rule not in VALIDATION_RULES:
            raise ValueError(f"validation_rule must be one of {VALIDATION_RULES}")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"stop_mode must be one of {STOP_MODES}")

    def radius(self, stage: int) -> float:
        return stage * self.eps_max / self.stages


@dataclass
class ValidationEnsemble:
    models: List[M.ModelHandle]

    def __post_init__(self):
        if not self.models:
            raise ValueError("validation ensemble must contain at least one model")
        if len({m.num_classes for m in self.models}) != 1:
            raise ValueError("validation models disagree on class count")


class QueryCounter:
    """Monotonic, thread-safe counter of target-model queries."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def add(self, k: int) -> None:
        with self._lock:
            self._n += int(k)

    @property
    def value(self) -> int:
        return self._n


class TargetOracle:
    """Label-only black-box access to a target model with an audited query count."""

    def __init__(self, model: M.ModelHandle, counter: Optional[QueryCounter] = None):
        self._model = model
        self.counter = counter or QueryCounter()

    @property
    def queries(self) -> int:
        return self.counter.value

    def query(self, x: np.ndarray) -> np.ndarray:
        """Predicted labels for a NHWC batch; counts one query per image."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        self.counter.add(len(x))
        return np.atleast_1d(M.predict_label(self._model, x))


@dataclass
class AdvTrace:
    sample_id: int
    label: int
    x_final: np.ndarray
    stop_stage: int
    stop_iteration: int
    exhausted: bool
    perturbation_linf: float
    validation_confidences: List[float]
    queries_used: int = 0
    rule: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "sample_id": int(self.sample_id),
            "label": int(self.label),
            "x_final": self.x_final.tolist(),
            "stop_stage": int(self.stop_stage),
            "stop_iteration": int(self.stop_iteration),
            "exhausted": bool(self.exhausted),
            "perturbation_linf": float(self.perturbation_linf),
            "validation_confidences": [float(c) for c in self.validation_confidences],
            "queries_used": int(self.queries_used),
            "rule": self.rule,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AdvTrace":
        d = json.loads(line)
        d["x_final"] = np.asarray(d["x_final"], dtype=np.float64)
        return cls(**d)


def write_traces(path, traces: Iterable[AdvTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")


def read_traces(path) -> List[AdvTrace]:
    with open(path, encoding="utf-8") as fh:
        return [AdvTrace.from_json(line) for line in fh if line.strip()]


@dataclass
class MembershipDecision:
    sample_id: int
    member: bool
    shots: int


# -- validation --------------------------------------------------------------

def validation_outputs(h: ValidationEnsemble, x: np.ndarray, y) -> Tuple[np.ndarray, np.ndarray]:
    """Per-model softmax confidence of ``y`` and predicted labels, each (B, models)."""
    if not isinstance(h, ValidationEnsemble):
        h = ValidationEnsemble(list(h))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    confs, preds = [], []
    rows = np.arange(len(x))
    for m in h.models:
        z = M.logits(m, x)
        confs.append(special.softmax(z, axis=1)[rows, y])
        preds.append(np.argmax(z, axis=1))
    return np.stack(confs, axis=1), np.stack(preds, axis=1)


def aggregate_confidence(confs: np.ndarray, rule: str) -> np.ndarray:
    if rule == "all-below":
        return confs.max(axis=1)
    if rule == "mean-below":
        return confs.mean(axis=1)
    raise ValueError(f"unknown validation rule {rule!r}")


def validation_confidence(h: ValidationEnsemble, x: np.ndarray, y: int, rule: str = "all-below") -> float:
    """Confidence compared against tau: max over models (all-below) or mean (mean-below)."""
    confs, _ = validation_outputs(h, x, y)
    return float(aggregate_confidence(confs, rule)[0])


# -- trajectory engine -------------------------------------------------------

Rule = Tuple[str, float]


def tau_rule(tau: float) -> Rule:
    return ("tau", float(tau))


LABEL_FLIP: Rule = ("label-flip", 0.0)
TARGET_FLIP: Rule = ("target-flip", 0.0)


def rule_name(rule: Rule) -> str:
    if rule[0] in ("tau", "stage"):
        return f"{rule[0]}={rule[1]:g}"
    return rule[0]


def _run_batch(
    X: np.ndarray,
    Y: np.ndarray,
    g: SourceEnsemble,
    h: Optional[ValidationEnsemble],
    cfg: AttackConfig,
    rules: Sequence[Rule],
    seed: int = 0,
    sample_ids: Optional[Sequence[int]] = None,
    admix_pool: Optional[AdmixPool] = None,
    flip_oracle: Optional[TargetOracle] = None,
) -> Dict[Rule, List[AdvTrace]]:
    """One batch of the trajectory engine; see ``run_trajectories``.

    Each sample keeps running until every rule has fired for it or all
    ``stages * iterations`` steps are spent; unfired rules then return the
    final example marked exhausted. Validation confidences are only needed for
    tau and label-flip rules. ``flip_oracle`` is only queried for the
    target-flip rule (a query-based search, never used by OSLO itself), and
    only for samples whose target flip is still pending.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    n = len(X)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    rules = list(dict.fromkeys(rules))
    if not rules:
        raise ValueError("at least one stopping rule is required")
    need_val = any(r[0] in ("tau", "label-flip") for r in rules)
    if need_val and h is None:
        raise ValueError("tau and label-flip rules need validation models")
    if TARGET_FLIP in rules and flip_oracle is None:
        raise ValueError("target-flip rule needs a target oracle")
    for r in rules:
        if r[0] == "stage" and not 1 <= r[1] <= cfg.stages:
            raise ValueError(f"snapshot stage {r[1]:g} outside 1..{cfg.stages}")
    if not isinstance(g, SourceEnsemble):
        g = SourceEnsemble(list(g))
    if h is not None and not isinstance(h, ValidationEnsemble):
        h = ValidationEnsemble(list(h))
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("inputs must lie in [0, 1]")

    rngs = [np.random.default_rng([int(seed), int(s) & 0xFFFFFFFF]) for s in ids]
    out: Dict[Rule, List[Optional[AdvTrace]]] = {r: [None] * n for r in rules}
    pending = np.ones((n, len(rules)), dtype=bool)
    flip_queries = np.zeros(n, dtype=np.int64)
    xcur = X.copy()
    mom = np.zeros_like(X)
    last_conf = np.full((n, len(h.models) if h is not None else 0), np.nan)
    active = np.arange(n)

    def record(j: int, rule_idx: int, stage: int, it: int, exhausted: bool) -> None:
        rule = rules[rule_idx]
        out[rule][j] = AdvTrace(
            sample_id=int(ids[j]), label=int(Y[j]), x_final=xcur[j].copy(), stop_stage=stage,
            stop_iteration=it, exhausted=exhausted,
            perturbation_linf=float(np.abs(xcur[j] - X[j]).max()),
            validation_confidences=[float(c) for c in last_conf[j]],
            queries_used=int(flip_queries[j]) if rule == TARGET_FLIP else 0, rule=rule_name(rule))

    for k in range(1, cfg.stages + 1):
        if len(active) == 0:
            break
        r = cfg.radius(k)
        mom[active] = 0.0
        for it in range(1, cfg.iterations + 1):
            a = active
            state = AttackState(xcur[a], mom[a], X[a], Y[a])
            g_eff = effective_gradient(g, state, cfg.methods, [rngs[j] for j in a], admix_pool)
            mom[a] = state.momentum
            xn = fgsm_step(state, g_eff, cfg.alpha)
            xn = np.clip(xn, X[a] - r, X[a] + r)
            xcur[a] = np.clip(xn, 0.0, 1.0)

            fired = np.zeros((len(a), len(rules)), dtype=bool)
            if need_val:
                confs, preds = validation_outputs(h, xcur[a], Y[a])
                last_conf[a] = confs
                agg = aggregate_confidence(confs, cfg.validation_rule)
                flipped = (preds != Y[a][:, None]).all(axis=1)
            for ri, rule in enumerate(rules):
                if rule[0] == "tau":
                    fired[:, ri] = agg < rule[1]
                elif rule == LABEL_FLIP:
                    fired[:, ri] = flipped
                elif rule[0] == "stage":
                    fired[:, ri] = k == int(rule[1]) and it == cfg.iterations
                elif rule == TARGET_FLIP:
                    ask = np.flatnonzero(pending[a, ri])
                    if len(ask):
                        fired[ask, ri] = flip_oracle.query(xcur[a[ask]]) != Y[a[ask]]
                        flip_queries[a[ask]] += 1
            fired &= pending[a]
            for row, ri in zip(*np.nonzero(fired)):
                record(int(a[row]), int(ri), k, it, False)
            pending[a] &= ~fired
            active = a[pending[a].any(axis=1)]
            if len(active) == 0:
                break

    for j, ri in zip(*np.nonzero(pending)):
        record(int(j), int(ri), cfg.stages, cfg.iterations, True)
    return {r: list(v) for r, v in out.items()}


TRAJECTORY_CHUNK = 200
_default_jobs = 1


def set_default_jobs(jobs: int) -> None:
    global _default_jobs
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    _default_jobs = int(jobs)


def default_jobs() -> int:
    """Worker count: ``OSLO_LAB_JOBS`` if set, else the value from ``set_default_jobs``."""
    env = os.environ.get("OSLO_LAB_JOBS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ValueError(f"OSLO_LAB_JOBS must be a positive integer, got {env!r}") from None
        if v < 1:
            raise ValueError(f"OSLO_LAB_JOBS must be a positive integer, got {env!r}")
        return v
    return _default_jobs


def _chunk_worker(args):
    X, Y, g, h, cfg, rules, seed, ids, pool, flip_model = args
    oracle = TargetOracle(flip_model) if flip_model is not None else None
    return _run_batch(X, Y, g, h, cfg, rules, seed, ids, pool, oracle)


def run_trajectories(
    X: np.ndarray,
    Y: np.ndarray,
    g: SourceEnsemble,
    h: Optional[ValidationEnsemble],
    cfg: AttackConfig,
    rules: Sequence[Rule],
    seed: int = 0,
    sample_ids: Optional[Sequence[int]] = None,
    admix_pool: Optional[AdmixPool] = None,
    flip_oracle: Optional[TargetOracle] = None,
    jobs: Optional[int] = None,
) -> Dict[Rule, List[AdvTrace]]:
    """Batched staged-perturbation attack recording the first stop for each rule.

    Samples are processed in fixed chunks of ``TRAJECTORY_CHUNK``; chunks are
    spread over ``jobs`` worker processes. Chunk boundaries never depend on
    ``jobs`` and every sample has its own random stream, so results are
    bit-identical for any worker count.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    jobs = default_jobs() if jobs is None else jobs
    bounds = [(s, min(s + TRAJECTORY_CHUNK, n)) for s in range(0, n, TRAJECTORY_CHUNK)]
    if len(bounds) <= 1:
        return _run_batch(X, Y, g, h, cfg, rules, seed, ids, admix_pool, flip_oracle)
    Y = np.asarray(Y, dtype=np.int64)
    if jobs <= 1:
        parts = [_run_batch(X[a:b], Y[a:b], g, h, cfg, rules, seed, ids[a:b], admix_pool, flip_oracle)
                 for a, b in bounds]
    else:
        flip_model = flip_oracle._model if flip_oracle is not None else None
        tasks = [(X[a:b], Y[a:b], g, h, cfg, list(rules), seed, ids[a:b], admix_pool, flip_model)
                 for a, b in bounds]
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(jobs, len(tasks))) as pool:
            parts = pool.map(_chunk_worker, tasks, chunksize=1)
        if flip_oracle is not None and TARGET_FLIP in parts[0]:
            flip_oracle.counter.add(sum(t.queries_used for p in parts for t in p[TARGET_FLIP]))
    return {r: [t for p in parts for t in p[r]] for r in parts[0]}


def stage_rule(stage: int) -> Rule:
    """Snapshot at the end of ``stage`` with no early stopping (uniform budget)."""
    return ("stage", float(stage))


def generate_adversarial(
    x: np.ndarray,
    y: int,
    g: SourceEnsemble,
    h: ValidationEnsemble,
    cfg: AttackConfig = AttackConfig(),
    seed: int = 0,
    sample_id: int = 0,
    admix_pool: Optional[AdmixPool] = None,
) -> AdvTrace:
    """Staged transferable adversarial example for one sample; no target queries."""
    rule = tau_rule(cfg.tau) if cfg.stop_mode == "tau-threshold" else LABEL_FLIP
    res = run_trajectories(np.asarray(x)[None], np.array([y]), g, h, cfg, [rule], seed,
                           [sample_id], admix_pool)
    return res[rule][0]


# -- membership decisions ----------------------------------------------------

class MissingTrace(LookupError):
    pass


def infer_membership(
    target: Union[TargetOracle, M.ModelHandle],
    traces: Sequence[Union[AdvTrace, Sequence[AdvTrace]]],
    shots: int = 1,
) -> List[MembershipDecision]:
    """Query the target once per shot; member iff every shot keeps the true label.

    ``traces[i]`` is either one trace or a list ordered by decreasing tau; the
    last ``shots`` entries are used.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    oracle = target if isinstance(target, TargetOracle) else TargetOracle(target)
    chosen: List[List[AdvTrace]] = []
    for item in traces:
        seq = [item] if isinstance(item, AdvTrace) else list(item)
        if len(seq) < shots:
            raise MissingTrace(f"sample {seq[0].sample_id if seq else '?'}: {shots} shots requested, "
                               f"{len(seq)} traces available")
        chosen.append(seq[len(seq) - shots:])
    if not chosen:
        return []
    flat = [t for seq in chosen for t in seq]
    preds = oracle.query(np.stack([t.x_final for t in flat]))
    decisions = []
    pos = 0
    for seq in chosen:
        ok = all(int(preds[pos + s]) == seq[s].label for s in range(shots))
        for s in range(shots):
            seq[s].queries_used += 1
        pos += shots
        decisions.append(MembershipDecision(seq[-1].sample_id, ok, shots))
    return decisions


@dataclass
class Panel:
    """Evaluation panel: images with true labels and ground-truth membership."""
    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    is_member: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_split(cls, data, split) -> "Panel":
        idx = np.concatenate([split.eval_members, split.eval_nonmembers])
        mem = np.r_[np.ones(len(split.eval_members), bool), np.zeros(len(split.eval_nonmembers), bool)]
        return cls(idx, data.images[idx], data.labels[idx], mem)


@dataclass
class SweepResult:
    curve: MetricCurve
    traces: Dict[float, List[AdvTrace]]
    decisions: Dict[float, List[MembershipDecision]]
    queries: int


def check_descending(taus: Sequence[float]) -> None:
    if len(taus) == 0:
        raise ValueError("tau list is empty")
    if any(not (a > b) for a, b in zip(taus, taus[1:])):
        raise ValueError(f"tau list must be strictly decreasing, got {list(taus)}")


def sweep_tau(
    panel: Panel,
    f: Union[TargetOracle, M.ModelHandle],
    g: SourceEnsemble,
    h: ValidationEnsemble,
    cfg: AttackConfig,
    taus: Sequence[float],
    seed: int = 0,
    admix_pool: Optional[AdmixPool] = None,
    extra_rules: Sequence[Rule] = (),
    flip_oracle: Optional[TargetOracle] = None,
) -> SweepResult:
    """Single-shot OSLO at each tau on the whole panel; one target query per sample per tau."""
    check_descending(taus)
    oracle = f if isinstance(f, TargetOracle) else TargetOracle(f)
    start = oracle.queries
    rules = [tau_rule(t) for t in taus] + list(extra_rules)
    res = run_trajectories(panel.images, panel.labels, g, h, cfg, rules, seed, panel.ids, admix_pool,
                           flip_oracle)
    curve = MetricCurve(param_name="tau")
    decisions, traces = {}, {}
    for t in taus:
        tr = res[tau_rule(t)]
        dec = infer_membership(oracle, tr, shots=1)
        flags = np.array([d.member for d in dec])
        curve.points.append(decision_point(flags, panel.is_member, t))
        decisions[t], traces[t] = dec, tr
    for rule in extra_rules:
        traces[rule_name(rule)] = res[rule]
    return SweepResult(curve, traces, decisions, oracle.queries - start)


@dataclass
class CalibrationResult:
    tau: float
    failure_rates: Dict[float, float]
    achievable: bool


def calibrate_tau(
    target_fpr: float,
    cal_images: np.ndarray,
    cal_labels: np.ndarray,
    f: Union[TargetOracle, M.ModelHandle],
    g: SourceEnsemble,
    h: ValidationEnsemble,
    cfg: AttackConfig,
    grid: Sequence[float] = CALIBRATION_GRID,
    seed: int = 0,
    sample_ids: Optional[Sequence[int]] = None,
) -> CalibrationResult:
    """Largest grid tau whose transfer-failure rate on known non-members is <= target_fpr."""
    if len(cal_images) == 0:
        raise ValueError("calibration set is empty")
    grid = sorted(grid, reverse=True)
    oracle = f if isinstance(f, TargetOracle) else TargetOracle(f)
    rules = [tau_rule(t) for t in grid]
    res = run_trajectories(cal_images, cal_labels, g, h, cfg, rules, seed, sample_ids)
    rates = {}
    for t in grid:
        dec = infer_membership(oracle, res[tau_rule(t)])
        rates[t] = float(np.mean([d.member for d in dec]))
    for t in grid:
        if rates[t] <= target_fpr:
            return CalibrationResult(t, rates, True)
    warnings.warn(f"target FPR {target_fpr} not reachable on the tau grid; using tau={grid[-1]}")
    return CalibrationResult(grid[-1], rates, False)


def multishot_decisions(
    oracle: Union[TargetOracle, M.ModelHandle],
    traces_by_tau: Dict[float, List[AdvTrace]],
    taus: Sequence[float],
    shots: int,
) -> List[MembershipDecision]:
    """Decisions at ``taus[-1]`` using it plus the ``shots - 1`` preceding (higher) taus."""
    check_descending(taus)
    if shots > len(taus):
        raise MissingTrace(f"{shots} shots need {shots} taus, got {len(taus)}")
    use = list(taus)[len(taus) - shots:]
    per_sample = list(zip(*[traces_by_tau[t] for t in use]))
    return infer_membership(oracle, [list(s) for s in per_sample], shots)
