from __future__ import annotations

import math

import pytest
from hypothesis import given, settings, strategies as st

from streamdepth.config import SCHEMA, SEED_ENV, ConfigError, RunConfig, load_config


def test_defaults_documented_and_valid():
    cfg = RunConfig()
    cfg.validate()
    assert all(doc for _, _, doc in SCHEMA.values())
    assert cfg["train.f_max"] == 10 and cfg["stream.sigma_eps"] == math.exp(-4.0)
    assert cfg.sweep_grid() == [-8.0, -6.0, -4.0, -2.0, 0.0]


def test_serialization_round_trip():
    cfg = RunConfig().updated(train__lr=1.2345678901234567e-4, world__moving=True, stream__strategy="naive")
    for docs in (False, True):
        assert RunConfig.parse(cfg.serialize(with_docs=docs)) == cfg


@settings(max_examples=30, deadline=None)
@given(lr=st.floats(1e-8, 1.0), seed=st.integers(0, 2**31), eps=st.floats(1e-6, 10.0))
def test_round_trip_property(lr, seed, eps):
    cfg = RunConfig({"train.lr": lr, "seed": seed, "stream.sigma_eps": eps})
    assert RunConfig.parse(cfg.serialize()) == cfg


def test_rejects_unknown_and_malformed():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.parse("train.learning_rate = 0.1")
    with pytest.raises(ConfigError, match=":2:"):
        RunConfig.parse("seed = 1\nnot a pair")
    with pytest.raises(ConfigError):
        RunConfig.parse("train.steps_stage1 = many")
    with pytest.raises(ConfigError):
        RunConfig()["nope"]
    with pytest.raises(ConfigError):
        RunConfig().set("world.moving", "perhaps")
    with pytest.raises(ConfigError):
        load_config(overrides=["stream.strategy=best"])
    with pytest.raises(ConfigError):
        load_config(overrides=["stream.overlap=10"])
    with pytest.raises(ConfigError):
        load_config(overrides=["eval.sweep_log_sigma_eps=a,b"])
    with pytest.raises(ConfigError):
        load_config(overrides=["seed"])


def test_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed = 3\ntrain.lr = 0.01  # trailing\n")
    cfg = load_config(path, ["train.lr=0.02"], env={})
    assert cfg["seed"] == 3 and cfg["train.lr"] == 0.02
    cfg = load_config(path, ["seed=4"], env={SEED_ENV: "11"})
    assert cfg["seed"] == 11
    assert cfg.train_config().seed == 11 and cfg.stream_config().seed == 11
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
