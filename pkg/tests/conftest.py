import pytest
import torch

from config import config_from_mapping
from trainer import build_experiment

# small enough that a few training steps run in well under a second each
TINY = {
    "image_size": "64",
    "num_train_images": "6",
    "num_test_images": "4",
    "object_min_size": "10",
    "object_max_size": "16",
    "d_embed": "16",
    "d_word": "16",
    "num_heads": "4",
    "ffn_hidden": "32",
    "roi_hidden": "32",
    "d_roi": "16",
    "num_tokens": "2",
    "pool_size": "4",
    "encoder_resolution": "16",
    "max_positions": "32",
    "context_length": "32",
    "steps": "3",
    "batch_size": "2",
    "queue_capacity": "8",
    "checkpoint_every": "2",
    "log_every": "1",
    "decay_step": "2",
}


@pytest.fixture
def tiny_overrides():
    """Flat key=value overrides for a tiny run."""
    return dict(TINY)


@pytest.fixture
def tiny_cfg():
    return config_from_mapping(TINY)


@pytest.fixture(scope="module")
def tiny_experiment():
    """A tiny experiment shared by read-only tests in one module."""
    return build_experiment(config_from_mapping(TINY))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
