"""Label-only baseline attacks: Gaussian-noise boundary, augmentation, shadow transfer, global threshold."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import models as M
from .data import LabeledDataset, augment
from .oslo import AdvTrace, MembershipDecision, Panel, TargetOracle


class BudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianConfig:
    sigma_grid: Tuple[float, ...] = (0.02, 0.04, 0.06, 0.08, 0.1, 0.13, 0.16, 0.2, 0.25, 0.3, 0.4, 0.5)
    trials_per_sigma: int = 5
    query_budget: int = 700

    def __post_init__(self):
        if not self.sigma_grid:
            raise ValueError("sigma grid must be non-empty")
        if any(b <= a for a, b in zip(self.sigma_grid, self.sigma_grid[1:])):
            raise ValueError("sigma grid must be strictly increasing")
        if self.trials_per_sigma < 1 or self.query_budget < 1:
            raise ValueError("trials and budget must be >= 1")


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_grid: Tuple[float, ...] = (-10.0, -5.0, 0.0, 5.0, 10.0)
    translation_grid: Tuple[Tuple[int, int], ...] = ((-1, 0), (1, 0), (0, -1), (0, 1), (1, 1))

    def __post_init__(self):
        if not self.rotation_grid and not self.translation_grid:
            raise ValueError("augmentation grids must not both be empty")

    def variants(self) -> List[Tuple[str, object]]:
        return [("rotate", r) for r in self.rotation_grid] + [("translate", t) for t in self.translation_grid]


@dataclass(frozen=True)
class ShadowConfig:
    arch: M.ArchSpec = M.ArchSpec("cnn-c")
    train: M.TrainConfig = M.TrainConfig(seed=7)
    relabel_budget: int = 1000

    def __post_init__(self):
        if self.relabel_budget < 1:
            raise ValueError("relabel budget must be >= 1")


@dataclass(frozen=True)
class BaselineConfig:
    gaussian: GaussianConfig = GaussianConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    shadow: ShadowConfig = ShadowConfig()


@dataclass
class BaselineScores:
    """Per-sample scores of one baseline; higher means more member-like."""
    attack: str
    ids: np.ndarray
    scores: np.ndarray
    is_member: np.ndarray
    queries: np.ndarray
    flagged: np.ndarray = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "score", "is_member", "queries"])
        for i, s, m, q in zip(self.ids, self.scores, self.is_member, self.queries):
            w.writerow([int(i), repr(float(s)), int(bool(m)), int(q)])
        return buf.getvalue()

    @property
    def total_queries(self) -> int:
        return int(np.sum(self.queries))


def _oracle(f) -> TargetOracle:
    return f if isinstance(f, TargetOracle) else TargetOracle(f)


def gaussian_boundary_score(f, x: np.ndarray, y: int, cfg: GaussianConfig = GaussianConfig(),
                            seed=0) -> Tuple[float, int, bool]:
    """Smallest grid sigma at which most noisy copies change the label.

    Returns (score, queries, budget_hit). Never flipping gives the largest
    sigma; running out of budget gives the last completed sigma.
    """
    oracle = _oracle(f)
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    used = 0
    completed = None
    for sigma in cfg.sigma_grid:
        if used + cfg.trials_per_sigma > cfg.query_budget:
            return (completed if completed is not None else cfg.sigma_grid[0]), used, True
        noisy = np.clip(x[None] + rng.normal(0.0, sigma, size=(cfg.trials_per_sigma,) + x.shape), 0.0, 1.0)
        preds = oracle.query(noisy)
        used += cfg.trials_per_sigma
        if 2 * int((preds != y).sum()) > cfg.trials_per_sigma:
            return float(sigma), used, False
        completed = float(sigma)
    return float(cfg.sigma_grid[-1]), used, False


def augmentation_attack_score(f, x: np.ndarray, y: int, cfg: AugmentationConfig = AugmentationConfig()) -> Tuple[int, int]:
    """Number of augmented variants still classified ``y``; returns (score, queries)."""
    oracle = _oracle(f)
    variants = np.stack([augment(x, kind, v) for kind, v in cfg.variants()])
    preds = oracle.query(variants)
    return int((preds == y).sum()), len(variants)


def shadow_confidences(shadow: M.ModelHandle, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = M.probabilities(shadow, images)
    return p[np.arange(len(labels)), labels]


def train_shadow(f, shadow_data: LabeledDataset, cfg: ShadowConfig = ShadowConfig()) -> Tuple[M.ModelHandle, int]:
    """Relabel ``shadow_data`` with the target (one query each) and train a shadow model."""
    if len(shadow_data) == 0:
        raise ValueError("shadow dataset is empty")
    if len(shadow_data) > cfg.relabel_budget:
        raise BudgetError(f"relabelling {len(shadow_data)} samples exceeds budget {cfg.relabel_budget}")
    oracle = _oracle(f)
    start = oracle.queries
    labels = oracle.query(shadow_data.images)
    relabelled = LabeledDataset(shadow_data.images, labels, shadow_data.num_classes, shadow_data.name + "-relabelled")
    return M.train(cfg.arch, relabelled, cfg.train), oracle.queries - start


def shadow_transfer_scores(f, shadow_data: LabeledDataset, cfg: ShadowConfig, panel: Panel) -> BaselineScores:
    shadow, used = train_shadow(f, shadow_data, cfg)
    scores = shadow_confidences(shadow, panel.images, panel.labels)
    # relabelling queries are shared; attribute them to the first sample only
    queries = np.zeros(len(panel), dtype=np.int64)
    if len(panel):
        queries[0] = used
    return BaselineScores("shadow", panel.ids, scores, panel.is_member, queries)


def gaussian_scores(f, panel: Panel, cfg: GaussianConfig = GaussianConfig(), seed: int = 0) -> BaselineScores:
    oracle = _oracle(f)
    out = [gaussian_boundary_score(oracle, panel.images[i], int(panel.labels[i]), cfg,
                                   np.random.default_rng([seed, int(panel.ids[i])]))
           for i in range(len(panel))]
    return BaselineScores("gaussian", panel.ids, np.array([o[0] for o in out]), panel.is_member,
                          np.array([o[1] for o in out], dtype=np.int64), np.array([o[2] for o in out]))


def augmentation_scores(f, panel: Panel, cfg: AugmentationConfig = AugmentationConfig()) -> BaselineScores:
    oracle = _oracle(f)
    out = [augmentation_attack_score(oracle, panel.images[i], int(panel.labels[i]), cfg) for i in range(len(panel))]
    return BaselineScores("augmentation", panel.ids, np.array([o[0] for o in out], dtype=np.float64),
                          panel.is_member, np.array([o[1] for o in out], dtype=np.int64))


def global_threshold_decisions(traces: Sequence[AdvTrace], threshold: float) -> List[MembershipDecision]:
    """Member iff the sample needed at least ``threshold`` L-inf perturbation."""
    return [MembershipDecision(t.sample_id, bool(t.perturbation_linf >= threshold), 0) for t in traces]


def global_threshold_scores(traces: Sequence[AdvTrace], is_member) -> BaselineScores:
    """Perturbation magnitudes as scores; sweeping a threshold over them is the global-threshold attack."""
    ids = np.array([t.sample_id for t in traces])
    return BaselineScores("global-threshold", ids, np.array([t.perturbation_linf for t in traces]),
                          np.asarray(is_member, dtype=bool), np.array([t.queries_used for t in traces], dtype=np.int64))
