import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import math

import pytest

from lodslab import config
from lodslab.config import (
    RunConfig,
    build_run_config,
    default_config_toml,
    dump_run_config,
    load_run_config,
    write_run_config,
)
from lodslab.utils import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.prior.variant == "sds"
    assert cfg.prior.w == 1000.0
    assert (cfg.prior.t_min, cfg.prior.t_max) == (0.02, 0.98)
    assert cfg.prior.noise_policy == "fresh"
    assert cfg.schedule.T == 1000
    assert cfg.denoiser.checkpoint is None


def test_default_toml_round_trips(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(default_config_toml())
    assert load_run_config(path) == RunConfig()
    assert "[prior]" in default_config_toml()


def test_infinite_guidance_round_trips(tmp_path):
    cfg = build_run_config({"prior": {"variant": "lods_embedding", "w": "inf"}})
    assert math.isinf(cfg.prior.w)
    path = write_run_config(cfg, tmp_path)
    assert path.name == config.CONFIG_FILE
    assert math.isinf(load_run_config(path).prior.w)


def test_overrides_merge_into_sections(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('seed = 3\n[prior]\nvariant = "dds"\nsteps = 10\n')
    cfg = load_run_config(path, {"prior": {"steps": 25}, "generator": {"particles": 8}})
    assert cfg.seed == 3
    assert cfg.prior.variant == "dds"
    assert cfg.prior.steps == 25
    assert cfg.generator.particles == 8


@pytest.mark.parametrize(
    "data",
    [
        {"prior": {"w": "abc"}},
        {"prior": {"w": -2}},
        {"prior": {"variant": "gan"}},
        {"prior": {"t_min": 0.9, "t_max": 0.1}},
        {"generator": {"channels": 2}},
        {"unknown": 1},
        {"denoiser": {"checkpoint": "/nonexistent/denoiser.lods"}},
    ],
)
def test_invalid_configs_raise_config_error(data):
    with pytest.raises(ConfigError):
        build_run_config(data)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[prior\nw = ")
    with pytest.raises(ConfigError):
        load_run_config(bad)


@pytest.mark.parametrize(
    "variant,generator,expected",
    [
        ("lods_embedding", "identity", config.EMBEDDING_LR_2D),
        ("lods_adapter", "identity", config.ADAPTER_LR_2D),
        ("lods_embedding", "splats", config.EMBEDDING_LR),
        ("vsd", "splats", config.ADAPTER_LR),
    ],
)
def test_state_learning_rate_defaults(variant, generator, expected):
    prior = build_run_config({"prior": {"variant": variant}}).prior
    assert prior.resolved_state_lr(generator) == expected
    explicit = build_run_config({"prior": {"variant": variant, "state_lr": 0.5}}).prior
    assert explicit.resolved_state_lr(generator) == 0.5


def test_dump_omits_unset_optionals():
    text = dump_run_config(RunConfig())
    assert "checkpoint" not in text
    assert "state_lr" not in text
