from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oslo_lab.baselines import GaussianConfig
from oslo_lab.config import ConfigError, ExperimentConfig, dump_config, parse_config
from oslo_lab.data import DEFAULT_SPLIT, SynthSpec
from oslo_lab.defenses import DEFENSE_GRIDS
from oslo_lab.models import TrainConfig
from oslo_lab.oslo import AttackConfig


def test_empty_file_gives_module_defaults():
    cfg = parse_config("")
    assert cfg.data.synth_spec() == SynthSpec()
    assert cfg.train.train_config(0) == TrainConfig()
    ac = cfg.attack.attack_config()
    assert replace(ac, methods=AttackConfig().methods) == AttackConfig()
    assert ac.methods.methods == {"TI", "DI", "MI"}
    assert cfg.baselines.baseline_config().gaussian == GaussianConfig()
    assert {k: tuple(cfg.defenses.grid(k)) for k in DEFENSE_GRIDS} == DEFENSE_GRIDS
    assert cfg.source.members() == [("cnn-b", i) for i in range(3)]


def test_split_defaults_match_data_module():
    sizes = parse_config("").split
    for k, v in DEFAULT_SPLIT.items():
        assert getattr(sizes, k) == v


def test_tau_out_of_range():
    with pytest.raises(ConfigError, match="attack.tau"):
        parse_config("[attack]\ntau = 1.5\n")


def test_validation_count_five():
    cfg = parse_config('[validation]\nfamilies = ["cnn-c", "cnn-d"]\ncount = 5\n')
    assert len(cfg.validation.members()) == 10


@pytest.mark.parametrize("text,path", [
    ("[attack]\nstagez = 3\n", "attack.stagez"),
    ("bogus = 1\n", "bogus"),
    ("[nope]\nx = 1\n", "nope"),
])
def test_unknown_keys_rejected(text, path):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert e.value.path == path


def test_type_errors_name_field():
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config('[train]\nepochs = "ten"\n')
    with pytest.raises(ConfigError, match="attack.target_flip_search"):
        parse_config("[attack]\ntarget_flip_search = 1\n")


def test_target_family_in_validation_rejected():
    with pytest.raises(ConfigError, match="validation.families"):
        parse_config('[validation]\nfamilies = ["cnn-a"]\n')
    with pytest.raises(ConfigError, match="source.families"):
        parse_config('[target]\nfamily = "cnn-b"\n')


def test_increasing_taus_rejected():
    with pytest.raises(ConfigError, match="attack.taus"):
        parse_config("[attack]\ntaus = [0.01, 0.1]\n")


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed = 1\n[attack\n")


def test_hash_ignores_output_dir():
    a, b = parse_config('out = "a"\n'), parse_config('out = "b"\n')
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != parse_config("seed = 1\n").config_hash()


def test_dump_round_trip():
    cfg = parse_config('seed = 4\n[attack]\ntaus = [0.3, 0.03]\nmethods = "TMDAI"\n')
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(ExperimentConfig())) == ExperimentConfig()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 100), st.floats(0, 1), st.sampled_from(["TDMI", "MI", "ifgsm"]))
def test_dump_parse_property(seed, stages, tau, methods):
    cfg = parse_config(f'seed = {seed}\n[attack]\nstages = {stages}\ntau = {tau!r}\nmethods = "{methods}"\n')
    assert parse_config(dump_config(cfg)) == cfg
