from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from prunebench.attacks import BbConfig, CwConfig
from prunebench.config import dump_config, parse_config, parse_config_text
from prunebench.errors import ConfigError
from prunebench.harness import DEFAULT_GRIDS, AttackSettings, EpsilonGrid, ExperimentConfig, PgdSettings
from prunebench.pruning import ALL_METHODS
from prunebench.training import TrainConfig


def test_empty_file_is_all_defaults():
    cfg = parse_config_text("")
    assert cfg == ExperimentConfig()
    assert cfg.rates == (2, 4, 8, 16, 32, 64) and cfg.seeds == (0, 1, 2, 3, 4)
    assert cfg.grids == DEFAULT_GRIDS


def test_non_power_of_two_rate():
    with pytest.raises(ConfigError, match=r"<config>:2: \[experiment\] rates: .*powers of two"):
        parse_config_text("[experiment]\nrates = [3]\n")


@pytest.mark.parametrize("text,where", [
    ("[experiment]\nseeds = [0]\nbogus = 1\n", ":3: [experiment] bogus: unknown key"),
    ("[nonsense]\nx = 1\n", ":1: [nonsense]: unknown section"),
    ("[train]\nmax_epochs = \"many\"\n", ":2: [train] max_epochs: expected an integer"),
    ("[train]\nlr_decay_factor = 2.0\n", ":1: [train]: lr_decay_factor"),
    ("[epsilons]\nL1 = [1, 2]\n", ":2: [epsilons] L1: unknown norm"),
    ("[epsilons]\nL2 = [2, 1]\n", ":2: [epsilons] L2: L2 grid must be"),
    ("[experiment]\nattacks = [\"fgsm\"]\n", ":2: [experiment] attacks: unknown attack"),
    ("[experiment]\nmethods = [\"unstructured-random-global\"]\n", ":2: [experiment] "),
    ("[experiment\nx = 1\n", ":1:"),
    ("[bb]\ninner_steps = 5\ninner_steps = 6\n", ":3:"),
])
def test_errors_name_line_and_field(text, where):
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    assert where in str(err.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.ini")


def test_shipped_configs_parse():
    from pathlib import Path
    for path in sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.ini")):
        cfg = parse_config(path)
        assert parse_config_text(dump_config(cfg)) == cfg


small_floats = st.floats(1e-6, 1e3, allow_nan=False)
grids = st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=5, unique=True).map(sorted)


@st.composite
def configs(draw):
    rates = draw(st.lists(st.sampled_from([2, 4, 8, 16, 32, 64]), min_size=1, unique=True).map(sorted))
    train = TrainConfig(lr0=draw(small_floats), max_epochs=draw(st.integers(1, 200)),
                        patience_epochs=draw(st.one_of(st.just(float("inf")), st.floats(1, 50))),
                        batch_size=draw(st.integers(1, 512)))
    return ExperimentConfig(
        dataset=draw(st.sampled_from(["mnist", "synthetic"])),
        data_dir=draw(st.text("abc/_-. ", min_size=1, max_size=12)),
        methods=tuple(m.name for m in draw(st.lists(st.sampled_from(ALL_METHODS), min_size=1, unique=True))),
        rates=tuple(rates),
        attacks=tuple(draw(st.lists(st.sampled_from(["pgd", "cw", "bb"]), min_size=1, unique=True))),
        seeds=tuple(draw(st.lists(st.integers(0, 2**31), min_size=1, max_size=5, unique=True))),
        subset=draw(st.integers(1, 1000)),
        calibrate=draw(st.booleans()),
        grids={**DEFAULT_GRIDS, "L2": EpsilonGrid("L2", tuple(draw(grids)))},
        train=train,
        finetune=replace(train, max_epochs=draw(st.integers(1, 10))),
        attack=AttackSettings(PgdSettings(steps=draw(st.integers(1, 100)), rel_step=draw(small_floats)),
                              CwConfig(initial_c=draw(small_floats), kappa=draw(st.floats(0, 10))),
                              BbConfig(inner_steps=draw(st.integers(1, 1000)))),
    )


@given(configs())
def test_canonical_round_trip(cfg):
    text = dump_config(cfg)
    assert parse_config_text(text) == cfg
    assert dump_config(parse_config_text(text)) == text
