import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oslo_lab import models as M
from oslo_lab.metrics import binomial_ci
from oslo_lab.oslo import (AdvTrace, AttackConfig, MissingTrace, Panel, QueryCounter, TargetOracle,
                           ValidationEnsemble, calibrate_tau, generate_adversarial, infer_membership,
                           multishot_decisions, read_traces, run_trajectories, sweep_tau, tau_rule,
                           validation_confidence, write_traces)
from oslo_lab.transfer import SourceEnsemble, TransferMethodParams

SHAPE = (4, 4, 1)


def fixed_logits(z):
    """A model whose logits are ``z`` for every input (zero weights, bias only)."""
    arch = M.ArchSpec("mlp")
    z = np.asarray(z, dtype=np.float64)
    params = {k: np.zeros_like(v) for k, v in M.init_params(arch, SHAPE, len(z), np.random.default_rng(0)).items()}
    params["out.b"] = z
    return M.ModelHandle(arch, params, len(z), SHAPE)


def mlp(seed, classes=3):
    arch = M.ArchSpec("mlp")
    return M.ModelHandle(arch, M.init_params(arch, SHAPE, classes, np.random.default_rng(seed)), classes, SHAPE)


class ScriptedOracle(TargetOracle):
    """Returns the label encoded in the first pixel of each queried image."""

    def __init__(self):
        super().__init__(None, QueryCounter())

    def query(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        self.counter.add(len(x))
        return np.rint(x[:, 0, 0, 0] * 10).astype(int)


def scripted_trace(sid, label, predicted):
    return AdvTrace(sid, label, np.full(SHAPE, predicted / 10), 1, 1, False, 0.0, [])


# -- validation confidence ---------------------------------------------------

def test_uniform_logits_confidence():
    assert validation_confidence(ValidationEnsemble([fixed_logits(np.zeros(10))]), np.zeros(SHAPE), 3) == \
        pytest.approx(0.1, abs=1e-15)


def test_peaked_logit_confidence():
    z = np.zeros(10)
    z[2] = 5.0
    got = validation_confidence(ValidationEnsemble([fixed_logits(z)]), np.zeros(SHAPE), 2)
    assert got == pytest.approx(math.exp(5) / (math.exp(5) + 9), abs=1e-12)
    assert got == pytest.approx(0.94276, abs=1e-4)


def test_all_below_takes_max():
    # softmax over [a, 0] gives conf(0) = 1 / (1 + e^-a)
    lo, hi = np.log(0.05 / 0.95), np.log(0.30 / 0.70)
    h = ValidationEnsemble([fixed_logits([lo, 0.0]), fixed_logits([hi, 0.0])])
    assert validation_confidence(h, np.zeros(SHAPE), 0, "all-below") == pytest.approx(0.30)
    assert validation_confidence(h, np.zeros(SHAPE), 0, "mean-below") == pytest.approx(0.175)
    assert not validation_confidence(h, np.zeros(SHAPE), 0) < 0.1


def test_empty_validation_ensemble():
    with pytest.raises(ValueError):
        ValidationEnsemble([])


def test_attack_config_ranges():
    for bad in ({"alpha": 0}, {"eps_max": 1.5}, {"stages": 0}, {"iterations": 0}, {"tau": -0.1},
                {"validation_rule": "any"}, {"stop_mode": "never"}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


# -- generation --------------------------------------------------------------

def test_tau_one_stops_after_one_step(rng):
    cfg = AttackConfig(stages=5, iterations=3, alpha=0.01, eps_max=0.1, tau=1.0)
    t = generate_adversarial(rng.random(SHAPE), 1, SourceEnsemble([mlp(0)]), ValidationEnsemble([mlp(1)]), cfg)
    assert (t.stop_stage, t.stop_iteration, t.exhausted) == (1, 1, False)
    assert 0 < t.perturbation_linf <= min(cfg.alpha, cfg.eps_max / cfg.stages) + 1e-12


def test_tau_zero_never_stops(rng):
    cfg = AttackConfig(stages=4, iterations=2, alpha=0.01, eps_max=0.05, tau=0.0)
    t = generate_adversarial(rng.random(SHAPE), 1, SourceEnsemble([mlp(0)]), ValidationEnsemble([mlp(1)]), cfg)
    assert t.exhausted and t.stop_stage == cfg.stages
    assert t.perturbation_linf <= cfg.eps_max + 1e-12
    assert t.queries_used == 0


def test_label_flip_mode_stops_when_every_validator_flips(rng):
    cfg = AttackConfig(stages=10, iterations=5, alpha=0.02, eps_max=0.5, stop_mode="label-flip")
    h = ValidationEnsemble([mlp(1), mlp(2)])
    t = generate_adversarial(rng.random(SHAPE) * 0.5 + 0.25, 0, SourceEnsemble([mlp(1), mlp(2)]), h, cfg)
    if not t.exhausted:
        assert all(M.predict_label(m, t.x_final) != 0 for m in h.models)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.9, 0.5, 0.2, 0.05]), st.sampled_from(["ifgsm", "TDMI"]))
def test_ball_containment(seed, tau, methods):
    rng = np.random.default_rng(seed)
    cfg = AttackConfig(stages=6, iterations=3, alpha=0.01, eps_max=0.06, tau=tau,
                       methods=TransferMethodParams.from_name(methods, ti_radius=1))
    x = rng.random((3,) + SHAPE)
    res = run_trajectories(x, rng.integers(0, 3, 3), SourceEnsemble([mlp(seed % 5)]),
                           ValidationEnsemble([mlp(seed % 5 + 1)]), cfg, [tau_rule(tau)], seed)
    for xi, t in zip(x, res[tau_rule(tau)]):
        assert np.abs(t.x_final - xi).max() <= t.stop_stage * cfg.eps_max / cfg.stages + 1e-12
        assert t.x_final.min() >= 0 and t.x_final.max() <= 1
        assert t.perturbation_linf == pytest.approx(np.abs(t.x_final - xi).max())


def test_stage_radius_nondecreasing():
    cfg = AttackConfig()
    radii = [cfg.radius(k) for k in range(1, cfg.stages + 1)]
    assert all(a <= b for a, b in zip(radii, radii[1:]))
    assert radii[-1] == pytest.approx(cfg.eps_max)


def test_jobs_do_not_change_results(rng):
    cfg = AttackConfig(stages=3, iterations=2, alpha=0.02, eps_max=0.06, methods=TransferMethodParams.from_name("TDMI"))
    x = rng.random((5,) + SHAPE)
    y = rng.integers(0, 3, 5)
    args = (x, y, SourceEnsemble([mlp(0)]), ValidationEnsemble([mlp(1)]), cfg, [tau_rule(0.3)], 4)
    a = run_trajectories(*args, jobs=1)[tau_rule(0.3)]
    b = run_trajectories(*args, jobs=2)[tau_rule(0.3)]
    assert [t.to_json() for t in a] == [t.to_json() for t in b]


# -- membership decisions ----------------------------------------------------

def test_decision_examples():
    oracle = ScriptedOracle()
    dec = infer_membership(oracle, [scripted_trace(0, 2, 2), scripted_trace(1, 2, 5)])
    assert [d.member for d in dec] == [True, False]
    assert oracle.queries == 2


def test_three_shots_last_flips_is_nonmember():
    oracle = ScriptedOracle()
    seq = [scripted_trace(0, 1, 1), scripted_trace(0, 1, 1), scripted_trace(0, 1, 4)]
    (d,) = infer_membership(oracle, [seq], shots=3)
    assert not d.member and d.shots == 3
    assert oracle.queries == 3


def test_missing_shot_trace():
    with pytest.raises(MissingTrace):
        infer_membership(ScriptedOracle(), [[scripted_trace(0, 1, 1)]], shots=2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=12), st.integers(1, 2))
def test_adding_a_shot_never_creates_members(outcomes, shots):
    taus = [0.1, 0.01, 0.001]
    by_tau = {t: [scripted_trace(i, 3, 3 if o[j] else 7) for i, o in enumerate(outcomes)]
              for j, t in enumerate(taus)}
    fewer = multishot_decisions(ScriptedOracle(), by_tau, taus, shots)
    more = multishot_decisions(ScriptedOracle(), by_tau, taus, shots + 1)
    for a, b in zip(fewer, more):
        assert a.member or not b.member
        assert b.member == all(outcomes[a.sample_id][3 - shots - 1:])


# -- persistence -------------------------------------------------------------

def test_trace_jsonl_round_trip(tmp_path, rng):
    traces = [AdvTrace(i, i % 3, rng.random(SHAPE), 2, 5, i == 1, 0.01 * i, [0.1, 0.2], 1, "tau=0.01")
              for i in range(3)]
    write_traces(tmp_path / "t.jsonl", traces)
    back = read_traces(tmp_path / "t.jsonl")
    assert [t.to_json() for t in back] == [t.to_json() for t in traces]
    assert set(__import__("json").loads(traces[0].to_json())) == {
        "sample_id", "label", "x_final", "stop_stage", "stop_iteration", "exhausted", "perturbation_linf",
        "validation_confidences", "queries_used", "rule"}


# -- sweeps and calibration on toy models -------------------------------------

def toy_panel(rng, n=6):
    return Panel(np.arange(n), rng.random((n,) + SHAPE), rng.integers(0, 3, n), np.arange(n) % 2 == 0)


def test_degenerate_sweep_records_one_point(rng):
    cfg = AttackConfig(stages=2, iterations=2, alpha=0.01, eps_max=0.02)
    res = sweep_tau(toy_panel(rng), mlp(0), SourceEnsemble([mlp(1)]), ValidationEnsemble([mlp(2)]), cfg, [1.0])
    assert len(res.curve.points) == 1
    assert all(t.perturbation_linf <= 0.01 + 1e-12 for t in res.traces[1.0])


def test_sweep_rejects_increasing_taus(rng):
    with pytest.raises(ValueError):
        sweep_tau(toy_panel(rng), mlp(0), SourceEnsemble([mlp(1)]), ValidationEnsemble([mlp(2)]),
                  AttackConfig(), [0.01, 0.1])


def test_sweep_without_members_has_null_tpr(rng):
    p = toy_panel(rng)
    p.is_member[:] = False
    cfg = AttackConfig(stages=2, iterations=2, alpha=0.01, eps_max=0.02)
    res = sweep_tau(p, mlp(0), SourceEnsemble([mlp(1)]), ValidationEnsemble([mlp(2)]), cfg, [0.5])
    pt = res.curve.points[0]
    assert pt.tpr is None and pt.fpr is not None


def test_calibrate_trivial_targets(rng):
    cfg = AttackConfig(stages=2, iterations=2, alpha=0.01, eps_max=0.02)
    x, y = rng.random((5,) + SHAPE), rng.integers(0, 3, 5)
    g, h = SourceEnsemble([mlp(1)]), ValidationEnsemble([mlp(2)])
    res = calibrate_tau(1.0, x, y, mlp(0), g, h, cfg, grid=[0.5, 0.1, 0.01])
    assert res.tau == 0.5 and res.achievable
    # target flips every calibration example at the smallest tau -> that tau is returned for target 0
    pred = M.predict_label(mlp(0), x)
    other = (pred + 1) % 3
    res = calibrate_tau(0.0, x, other, mlp(0), g, h, cfg, grid=[0.5, 0.1, 0.01])
    assert res.achievable and res.failure_rates[res.tau] == 0.0
    assert res.tau == 0.5


def test_calibrate_unachievable_warns(rng):
    cfg = AttackConfig(stages=2, iterations=2, alpha=0.01, eps_max=0.02)
    x = rng.random((4,) + SHAPE)
    y = M.predict_label(mlp(0), x)
    with pytest.warns(UserWarning):
        res = calibrate_tau(0.0, x, y, mlp(0), SourceEnsemble([mlp(1)]), ValidationEnsemble([mlp(2)]), cfg,
                            grid=[0.5, 0.1])
    assert res.tau == 0.1 and not res.achievable


def test_calibrate_empty_set():
    with pytest.raises(ValueError):
        calibrate_tau(0.05, np.zeros((0,) + SHAPE), np.zeros(0, int), mlp(0), [mlp(1)], [mlp(2)], AttackConfig())


# -- desk-scale behaviour ------------------------------------------------------

@pytest.fixture(scope="module")
def desk_sweep(desk, surrogates):
    oracle = TargetOracle(desk["target"])
    res = sweep_tau(surrogates["panel"], oracle, surrogates["g"], surrogates["h"], AttackConfig(), [0.1, 0.01],
                    seed=0)
    return res, oracle


def test_lower_tau_needs_more_stages(desk_sweep):
    res, _ = desk_sweep
    mean_stage = {t: np.mean([tr.stop_stage for tr in res.traces[t]]) for t in (0.1, 0.01)}
    assert mean_stage[0.01] > mean_stage[0.1]


def test_single_shot_query_audit(desk_sweep, surrogates):
    res, oracle = desk_sweep
    n = len(surrogates["panel"])
    assert res.queries == oracle.queries == 2 * n
    assert all(t.queries_used == 1 for t in res.traces[0.01])


def test_desk_determinism(desk, surrogates):
    p = surrogates["panel"]
    sub = Panel(p.ids[25:35], p.images[25:35], p.labels[25:35], p.is_member[25:35])
    cfg = AttackConfig(stages=20)
    a = sweep_tau(sub, desk["target"], surrogates["g"], surrogates["h"], cfg, [0.05], seed=3)
    b = sweep_tau(sub, desk["target"], surrogates["g"], surrogates["h"], cfg, [0.05], seed=3)
    assert [d.member for d in a.decisions[0.05]] == [d.member for d in b.decisions[0.05]]
    assert [t.to_json() for t in a.traces[0.05]] == [t.to_json() for t in b.traces[0.05]]


def test_calibrated_tau_holds_on_fresh_nonmembers(desk, surrogates):
    data, split = desk["data"], desk["split"]
    cal, hold = split.calibration[:80], split.holdout[:80]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = calibrate_tau(0.05, data.images[cal], data.labels[cal], desk["target"], surrogates["g"],
                            surrogates["h"], AttackConfig(), sample_ids=cal)
    rule = tau_rule(res.tau)
    tr = run_trajectories(data.images[hold], data.labels[hold], surrogates["g"], surrogates["h"], AttackConfig(),
                          [rule], 0, hold)[rule]
    fails = sum(d.member for d in infer_membership(desk["target"], tr))
    lo, _ = binomial_ci(fails, len(hold))
    assert lo <= max(0.05, res.failure_rates[res.tau])
