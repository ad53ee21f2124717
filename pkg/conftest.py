import pytest
import torch

from config import RunConfig
from synthworld import generate_dataset, make_world


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def world():
    return make_world(0)


@pytest.fixture(scope="session")
def small_world():
    return make_world(0, {"image_size": 16})


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return generate_dataset(small_world, 48, "train", 0)


def tiny_config(output_dir, **overrides) -> RunConfig:
    """A config that runs every stage in seconds."""
    values = dict(
        train_size=48,
        test_size=16,
        image_size=16,
        text_dim=16,
        text_layers=1,
        text_heads=2,
        lora_rank=2,
        pretrain_steps=3,
        text_steps=3,
        text_batch=4,
        visual_dim=16,
        timesteps=10,
        unet_channels=8,
        diffusion_train_steps=3,
        diffusion_batch=4,
        sample_steps=3,
        probe_steps=3,
        probe_batch=8,
        probe_gate=0.0,
        inference_captions=1,
        visualization_seeds=2,
        mix_samples=2,
        log_every=1,
        output_dir=str(output_dir),
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path / "run")
