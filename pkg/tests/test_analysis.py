import numpy as np
import pytest

from oslo_lab import models as M
from oslo_lab.analysis import (AblationRow, ComparisonRow, calibrate_uniform_grid, eps_to_stage,
                               global_threshold_for_count, matched_fraction_comparison, membership_signal_test,
                               tie_broken_threshold_row,
                               multishot_study, rows_to_csv, rows_to_markdown, stop_mode_rows,
                               uniform_budget_ablation)
from oslo_lab.oslo import (LABEL_FLIP, AdvTrace, AttackConfig, Panel, TargetOracle, run_trajectories, sweep_tau,
                           tau_rule)

SHAPE = (4, 4, 1)


def mlp(seed, classes=3):
    arch = M.ArchSpec("mlp")
    return M.ModelHandle(arch, M.init_params(arch, SHAPE, classes, np.random.default_rng(seed)), classes, SHAPE)


def test_matched_fraction_flag_all():
    mem = np.array([1, 1, 0, 0, 0], bool)
    rows = matched_fraction_comparison({0.1: np.ones(5, bool), 0.01: np.zeros(5, bool)},
                                       np.arange(5) / 10, mem, 1.0)
    assert [r.precision for r in rows] == [pytest.approx(0.4)] * 2
    assert all(r.matched for r in rows)


def test_matched_fraction_flag_none():
    mem = np.array([1, 1, 0, 0, 0], bool)
    rows = matched_fraction_comparison({0.1: np.ones(5, bool), 0.01: np.zeros(5, bool)},
                                       np.arange(5) / 10, mem, 0.0)
    assert [r.precision for r in rows] == [None, None]


def test_matched_counts_within_one():
    rng = np.random.default_rng(0)
    mem = rng.random(100) < 0.5
    flags = {t: rng.random(100) < f for t, f in ((0.1, 0.4), (0.01, 0.16), (0.001, 0.05))}
    rows = matched_fraction_comparison(flags, rng.random(100), mem, 0.15)
    assert rows[0].param == 0.01
    assert abs(rows[0].flagged - rows[1].flagged) <= 1 and rows[0].matched


def test_tied_magnitudes_report_nearest_count():
    t, c = global_threshold_for_count(np.array([0.1, 0.1, 0.1, 0.5]), 2)
    assert (t, c) == (0.5, 1)
    # all magnitudes tied: a plain threshold flags 0 or 5, so ties are broken at random for exactly 3
    rows = matched_fraction_comparison({0.1: np.array([1, 1, 1, 0, 0], bool)}, np.array([0.2] * 5),
                                       np.array([1, 0, 1, 0, 1], bool), 0.6)
    assert rows[1].flagged == 3 and rows[1].matched
    assert rows[1].precision == pytest.approx(3 / 5)


def test_tie_break_expectation_matches_enumeration():
    mags = np.array([0.5, 0.3, 0.3, 0.3, 0.1])
    mem = np.array([0, 1, 0, 1, 1], bool)
    row = tie_broken_threshold_row(mags, mem, 3)
    # flag 0.5 plus every 2-subset of the three tied samples
    tied = [1, 2, 3]
    precs = [(int(mem[0]) + int(mem[a]) + int(mem[b])) / 3 for i, a in enumerate(tied) for b in tied[i + 1:]]
    assert row.precision == pytest.approx(np.mean(precs))
    assert tie_broken_threshold_row(mags, mem, 0).precision is None


def test_signal_test_detects_shift():
    rng = np.random.default_rng(1)
    mags = np.r_[rng.normal(1.0, 0.2, 100), rng.normal(0.8, 0.2, 100)]
    mem = np.r_[np.ones(100, bool), np.zeros(100, bool)]
    m, n, p = membership_signal_test(mags, mem)
    assert m > n and p < 1e-6


def test_eps_to_stage():
    cfg = AttackConfig()
    assert eps_to_stage(0.0, cfg) == 0
    assert eps_to_stage(8 / 255, cfg) == 8
    with pytest.raises(ValueError):
        eps_to_stage(0.5 / 255, cfg)


def test_ablation_eps_zero_flags_correct_predictions(rng):
    f = mlp(0)
    x = rng.random((8,) + SHAPE)
    y = M.predict_label(f, x)
    panel = Panel(np.arange(8), x, y, np.arange(8) % 2 == 0)
    cfg = AttackConfig(stages=4, iterations=2, alpha=0.02, eps_max=0.08)
    oracle = TargetOracle(f)
    rows = uniform_budget_ablation(panel, oracle, [mlp(1)], cfg, [0.0, 0.02, 0.08])
    assert (rows[0].tpr, rows[0].fpr) == (1.0, 1.0)
    assert oracle.queries == 3 * 8 == sum(r.queries for r in rows)


def test_stop_mode_rows_use_archived_flags_without_queries(rng):
    panel = Panel(np.arange(4), rng.random((4,) + SHAPE), np.zeros(4, int), np.array([1, 1, 0, 0], bool))
    tr = [AdvTrace(i, 0, panel.images[i], 2, 1, False, 0.0, []) for i in range(4)]
    oracle = TargetOracle(mlp(0))
    rows = stop_mode_rows(panel, {"tau=0.01": tr}, oracle, {"tau=0.01": np.array([1, 0, 0, 0], bool)})
    assert oracle.queries == 0
    assert (rows[0].tpr, rows[0].fpr, rows[0].mean_stop_stage) == (0.5, 0.0, 2.0)


def test_binary_label_flip_stops_no_later_than_half_tau(rng):
    # with two classes and one validator, flipping the label means confidence < 0.5
    f, g, h = mlp(0, 2), [mlp(1, 2)], [mlp(2, 2)]
    x = rng.random((6,) + SHAPE)
    y = M.predict_label(h[0], x)
    cfg = AttackConfig(stages=8, iterations=3, alpha=0.02, eps_max=0.4)
    res = run_trajectories(x, y, g, h, cfg, [LABEL_FLIP, tau_rule(0.5)])
    for a, b in zip(res[LABEL_FLIP], res[tau_rule(0.5)]):
        assert (a.stop_stage, a.stop_iteration) <= (b.stop_stage, b.stop_iteration)


def test_rendering():
    rows = [AblationRow(0.1, 3, 0.5, None, 10)]
    md = rows_to_markdown(rows, "t")
    assert "| eps | stage | tpr | fpr | queries |" in md and "null" in md
    assert rows_to_csv(rows) == "eps,stage,tpr,fpr,queries\n0.1,3,0.5,null,10\n"
    assert rows_to_csv([]) == ""


# -- desk-scale behaviour ------------------------------------------------------

@pytest.fixture(scope="module")
def desk_traces(desk, surrogates):
    taus = [0.1, 0.05, 0.01]
    res = sweep_tau(surrogates["panel"], desk["target"], surrogates["g"], surrogates["h"], AttackConfig(), taus,
                    seed=1)
    return taus, res


def test_multishot_containment_and_small_gain(desk, surrogates, desk_traces):
    taus, res = desk_traces
    rows = multishot_study(surrogates["panel"], desk["target"], res.traces, taus, 3)
    at_low = {r.shots: r for r in rows if r.tau == 0.01}
    single = res.curve.points[-1]
    assert at_low[1].flagged == single.flagged
    assert at_low[1].flagged >= at_low[2].flagged >= at_low[3].flagged
    if at_low[3].precision is not None and at_low[1].precision is not None:
        assert at_low[3].precision - at_low[1].precision < 0.05 + 1 / max(at_low[3].flagged, 1)


def test_ablation_large_eps_collapses_rates(desk, surrogates):
    data, split = desk["data"], desk["split"]
    cal = split.calibration[:60]
    cfg = AttackConfig()
    small, medium, large = calibrate_uniform_grid(data.images[cal], data.labels[cal], surrogates["g"],
                                                  surrogates["h"], cfg)
    assert small <= medium <= large
    eps = [k * cfg.eps_max / cfg.stages for k in (small, medium, large)]
    rows = uniform_budget_ablation(surrogates["panel"], desk["target"], surrogates["g"], cfg, eps)
    tprs, fprs = [r.tpr for r in rows], [r.fpr for r in rows]
    assert tprs == sorted(tprs, reverse=True) and fprs == sorted(fprs, reverse=True)
    assert tprs[-1] < tprs[0] and fprs[-1] <= fprs[0]
