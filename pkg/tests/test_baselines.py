import numpy as np
import pytest

from oslo_lab import models as M
from oslo_lab.baselines import (AugmentationConfig, BaselineScores, BudgetError, GaussianConfig, ShadowConfig,
                                augmentation_attack_score, augmentation_scores, gaussian_boundary_score,
                                gaussian_scores, global_threshold_decisions, global_threshold_scores,
                                shadow_confidences, shadow_transfer_scores, train_shadow)
from oslo_lab.data import LabeledDataset
from oslo_lab.metrics import ScoredPanel, roc_points
from oslo_lab.oslo import AdvTrace, TargetOracle

SHAPE = (6, 6, 1)


def constant(label, classes=3):
    arch = M.ArchSpec("mlp")
    params = {k: np.zeros_like(v) for k, v in M.init_params(arch, SHAPE, classes, np.random.default_rng(0)).items()}
    params["out.b"] = np.eye(classes)[label]
    return M.ModelHandle(arch, params, classes, SHAPE)


def auc(scores, mem):
    s, m = np.asarray(scores), np.asarray(mem, bool)
    pos, neg = s[m], s[~m]
    return float(np.mean((pos[:, None] > neg[None]) + 0.5 * (pos[:, None] == neg[None])))


# -- gaussian ----------------------------------------------------------------

def test_gaussian_never_flips_gives_sigma_max(rng):
    cfg = GaussianConfig()
    score, used, hit = gaussian_boundary_score(constant(1), rng.random(SHAPE), 1, cfg)
    assert score == cfg.sigma_grid[-1] and not hit
    assert used == cfg.trials_per_sigma * len(cfg.sigma_grid)


def test_gaussian_always_flipped_gives_first_sigma(rng):
    cfg = GaussianConfig()
    score, used, _ = gaussian_boundary_score(constant(2), rng.random(SHAPE), 1, cfg)
    assert score == cfg.sigma_grid[0] and used == cfg.trials_per_sigma


def test_gaussian_budget_prefix(rng):
    cfg = GaussianConfig(sigma_grid=(0.1, 0.2, 0.3), trials_per_sigma=5, query_budget=12)
    score, used, hit = gaussian_boundary_score(constant(1), rng.random(SHAPE), 1, cfg)
    assert hit and score == 0.2 and used == 10


def test_gaussian_config_checks():
    with pytest.raises(ValueError):
        GaussianConfig(sigma_grid=())
    with pytest.raises(ValueError):
        GaussianConfig(sigma_grid=(0.2, 0.1))
    with pytest.raises(ValueError):
        GaussianConfig(query_budget=0)


def test_gaussian_deterministic_and_within_budget(desk, surrogates):
    p = surrogates["panel"]
    a = gaussian_scores(desk["target"], p, seed=5)
    b = gaussian_scores(desk["target"], p, seed=5)
    np.testing.assert_array_equal(a.scores, b.scores)
    assert a.queries.max() <= 700


def test_gaussian_members_more_robust(desk, surrogates):
    s = gaussian_scores(desk["target"], surrogates["panel"], seed=0)
    assert s.scores[s.is_member].mean() > s.scores[~s.is_member].mean()


# -- augmentation ------------------------------------------------------------

def test_identity_grid_scores_correctness(rng):
    cfg = AugmentationConfig(rotation_grid=(0.0,), translation_grid=())
    x = rng.random(SHAPE)
    assert augmentation_attack_score(constant(1), x, 1, cfg) == (1, 1)
    assert augmentation_attack_score(constant(1), x, 0, cfg) == (0, 1)


def test_invariant_model_scores_grid_size(rng):
    cfg = AugmentationConfig()
    score, used = augmentation_attack_score(constant(0), rng.random(SHAPE), 0, cfg)
    assert score == used == len(cfg.variants())


def test_augmentation_members_score_higher(desk, surrogates):
    s = augmentation_scores(desk["target"], surrogates["panel"])
    assert s.scores[s.is_member].mean() > s.scores[~s.is_member].mean()
    assert s.queries.max() <= len(AugmentationConfig().variants())


# -- shadow ------------------------------------------------------------------

def test_identity_shadow_matches_target_confidences(desk, surrogates):
    p = surrogates["panel"]
    probs = M.probabilities(desk["target"], p.images)
    np.testing.assert_allclose(shadow_confidences(desk["target"], p.images, p.labels),
                               probs[np.arange(len(p)), p.labels])


def test_empty_shadow_data():
    empty = LabeledDataset(np.zeros((0,) + SHAPE), np.zeros(0, int), 3)
    with pytest.raises(ValueError):
        train_shadow(constant(0), empty)


def test_shadow_budget_violation(rng):
    data = LabeledDataset(rng.random((5,) + SHAPE), np.arange(5) % 3, 3)
    with pytest.raises(BudgetError):
        train_shadow(constant(0), data, ShadowConfig(relabel_budget=4))


def test_shadow_scores_carry_signal(desk, surrogates):
    split, data = desk["split"], desk["data"]
    shadow_data = data.subset(split.surrogate_train[:500])
    oracle = TargetOracle(desk["target"])
    cfg = ShadowConfig(train=M.TrainConfig(epochs=30, seed=7))
    s = shadow_transfer_scores(oracle, shadow_data, cfg, surrogates["panel"])
    assert oracle.queries == s.total_queries == 500
    assert auc(s.scores, s.is_member) > 0.5


# -- global threshold --------------------------------------------------------

def traces(mags):
    return [AdvTrace(i, 0, np.zeros(SHAPE), 1, 1, False, float(m), []) for i, m in enumerate(mags)]


def test_global_threshold_extremes():
    tr = traces([0.01, 0.05, 0.2])
    assert all(d.member for d in global_threshold_decisions(tr, 0.0))
    assert not any(d.member for d in global_threshold_decisions(tr, 0.21))


def test_global_threshold_roc_is_proper(rng):
    mags = rng.random(30)
    mem = rng.random(30) < 0.5
    mem[:2] = [True, False]
    s = global_threshold_scores(traces(mags), mem)
    pts = roc_points(ScoredPanel(s.ids, s.scores, s.is_member)).points
    # points run from high to low threshold: both rates non-decreasing
    assert all(a.tpr <= b.tpr and a.fpr <= b.fpr for a, b in zip(pts, pts[1:]))


def test_scores_csv():
    s = BaselineScores("x", np.array([3]), np.array([0.5]), np.array([True]), np.array([7]))
    assert s.to_csv() == "sample_id,score,is_member,queries\n3,0.5,1,7\n"
