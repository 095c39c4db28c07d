import logging

import pytest

from flowrft.config import ExperimentConfig, clear_config_cache
from flowrft.model import ModelArch, VelocityModel

TINY_ARCH = ModelArch(data_dim=2, hidden_widths=(16, 16), activation="tanh",
                      time_embed_dim=4, cond_dim=4, n_conditions=4)


@pytest.fixture(autouse=True)
def isolated_environment(tmp_path, monkeypatch):
    """Keep config discovery away from the developer's real files."""
    home = tmp_path / "home"
    home.mkdir()
    monkeypatch.setenv("HOME", str(home))
    monkeypatch.chdir(tmp_path)
    clear_config_cache()
    yield
    clear_config_cache()
    package_logger = logging.getLogger("flowrft")
    package_logger.handlers.clear()
    package_logger.propagate = True
    package_logger.setLevel(logging.NOTSET)


@pytest.fixture
def tiny_model():
    return VelocityModel.from_arch(TINY_ARCH, seed=0)


def small_settings(out_dir, **overrides):
    settings = dict(
        out_dir=str(out_dir),
        hidden_widths=[16, 16],
        activation="tanh",
        time_embed_dim=4,
        cond_dim=4,
        n_modes=4,
        num_steps=8,
        perception_knot=2,
        group_size=6,
        cluster_size=3,
        schedule_period=4,
        coarse_ratio=0.5,
        iterations=2,
        prompts_per_iteration=2,
        pretrain_steps=20,
        pretrain_batch_size=32,
        dataset_size=256,
        eval_probes=4,
        diag_seeds=4,
        verify_probes=2,
    )
    settings.update(overrides)
    return settings


@pytest.fixture
def small_config(tmp_path):
    """A configuration small enough to pretrain and fine-tune in seconds."""
    return ExperimentConfig.from_dict(small_settings(tmp_path / "run"))


@pytest.fixture
def pretrained_config(small_config):
    """small_config with its pretrained checkpoint already on disk."""
    from flowrft.engine import run_pretrain

    run_pretrain(small_config)
    return small_config


@pytest.fixture
def make_config(tmp_path):
    """Factory for small configurations with extra overrides."""
    def build(**overrides):
        out_dir = overrides.pop("out_dir", tmp_path / "run")
        return ExperimentConfig.from_dict(small_settings(out_dir, **overrides))
    return build


@pytest.fixture(scope="session")
def default_pretrained_config(tmp_path_factory):
    """Default-sized configuration with its pretrained checkpoint, shared by the slow runs."""
    from flowrft.engine import run_pretrain

    config = ExperimentConfig.default(out_dir=str(tmp_path_factory.mktemp("default") / "run"))
    run_pretrain(config)
    return config
