import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oslo_lab import models as M
from oslo_lab.data import (IdxFormatError, LabeledDataset, SplitPlan, SynthSpec, augment, export_idx_dataset,
                           load_idx_dataset, make_split, rotate, synth_dataset, translate)


def test_small_synth_is_balanced():
    d = synth_dataset(SynthSpec(num_classes=4, per_class=50), seed=1)
    assert len(d) == 200
    assert np.bincount(d.labels).tolist() == [50] * 4
    assert d.images.min() >= 0 and d.images.max() <= 1


def test_synth_is_deterministic():
    spec = SynthSpec(num_classes=4, per_class=20)
    a, b = synth_dataset(spec, seed=3), synth_dataset(spec, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_default_synth_gives_generalization_gap(desk):
    gap = M.accuracy(desk["target"], desk["train"]) - M.accuracy(desk["target"], desk["test"])
    assert M.accuracy(desk["target"], desk["train"]) >= 0.9
    assert gap >= 0.15


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(num_classes=3)
    with pytest.raises(ValueError):
        SynthSpec(size=10)


def _fixture(n=4, shape=(5, 5)):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n,) + shape).astype(np.float64) / 255.0
    return LabeledDataset(imgs[..., None], np.arange(n) % 3, 3, "fx")


def test_idx_round_trip(tmp_path):
    d = _fixture()
    export_idx_dataset(d, tmp_path / "i.idx", tmp_path / "l.idx")
    back = load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx", 3)
    assert len(back) == 4
    np.testing.assert_array_equal(back.images, d.images)
    np.testing.assert_array_equal(back.labels, d.labels)


def test_idx_label_count_mismatch(tmp_path):
    export_idx_dataset(_fixture(4), tmp_path / "i.idx", tmp_path / "l.idx")
    export_idx_dataset(_fixture(3), tmp_path / "i3.idx", tmp_path / "l3.idx")
    with pytest.raises(IdxFormatError):
        load_idx_dataset(tmp_path / "i.idx", tmp_path / "l3.idx")


def test_idx_bad_magic(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x12\x34\x08\x01\x00\x00\x00\x01\x00")
    export_idx_dataset(_fixture(1), tmp_path / "i.idx", tmp_path / "l.idx")
    with pytest.raises(IdxFormatError):
        load_idx_dataset(tmp_path / "i.idx", tmp_path / "bad.idx")


def test_split_disjointness():
    plan = make_split(1000, {"target_train": 400, "surrogate_train": 400, "eval_members": 100,
                             "eval_nonmembers": 100, "calibration": 50}, seed=0)
    plan.check()
    tt = set(plan.target_train.tolist())
    assert not tt & set(plan.surrogate_train.tolist())
    assert set(plan.eval_members.tolist()) <= tt
    assert not set(plan.eval_nonmembers.tolist()) & tt
    assert len(plan.eval_members) == len(plan.eval_nonmembers) == 100


def test_split_infeasible():
    with pytest.raises(ValueError):
        make_split(100, {"target_train": 80, "surrogate_train": 80})


def test_split_seeds_differ():
    a, b = make_split(3000, seed=1), make_split(3000, seed=2)
    overlap = len(set(a.eval_members.tolist()) & set(b.eval_members.tolist())) / len(a.eval_members)
    assert overlap < 1.0


def test_split_json_round_trip():
    a = make_split(3000, seed=5)
    b = SplitPlan.from_json(a.to_json())
    for k in ("target_train", "surrogate_train", "eval_members", "eval_nonmembers", "calibration", "holdout"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


@settings(max_examples=30, deadline=None)
@given(st.integers(200, 2000), st.integers(0, 2 ** 31))
def test_split_invariants_property(n, seed):
    sizes = {"target_train": n // 4, "surrogate_train": n // 4, "eval_members": n // 10,
             "eval_nonmembers": n // 10, "calibration": n // 20}
    plan = make_split(n, sizes, seed)
    plan.check()
    allidx = np.concatenate([plan.target_train, plan.surrogate_train, plan.eval_nonmembers,
                             plan.calibration, plan.holdout])
    assert len(np.unique(allidx)) == len(allidx) == n


def test_rotate_zero_is_identity(rng):
    x = rng.random((8, 8, 1))
    np.testing.assert_array_equal(rotate(x, 0), x)


def test_translate_inverse_restores_interior(rng):
    x = rng.random((8, 8, 1))
    back = translate(translate(x, 1, 0), -1, 0)
    np.testing.assert_array_equal(back[:, :-1], x[:, :-1])


def test_four_quarter_turns_identity(rng):
    x = rng.random((8, 8, 1))
    y = x
    for _ in range(4):
        y = rotate(y, 90)
    np.testing.assert_array_equal(y, x)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["rotate", "translate"]), st.integers(-30, 30), st.integers(-3, 3), st.integers(-3, 3))
def test_augment_stays_in_unit_box(kind, deg, dx, dy):
    x = np.random.default_rng(abs(deg)).random((8, 8, 1))
    out = augment(x, kind, deg if kind == "rotate" else (dx, dy))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_translate_too_far():
    with pytest.raises(ValueError):
        translate(np.zeros((4, 4, 1)), 4, 0)
