import os

import numpy as np
import pytest

from attn_style import Tensor, UNetConfig, UNetWeights, build_noise_schedule
from attn_style.hooks import AttentionHook


# Three levels, attention on levels 1 and 2: five attention layers on an 8×8 grid.
TINY_UNET = {
    "resolution": 8,
    "base_channels": 4,
    "levels": 3,
    "attention_levels": [1, 2],
    "norm_groups": 2,
    "time_embedding_dim": 8,
    "T_train": 20,
}

TINY_DATASET = {
    "train_content": 2,
    "train_style": 2,
    "val_content": 1,
    "val_style": 1,
}


def random_image(rng, shape=(3, 8, 8)):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


class CallCounter(AttentionHook):
    """Counts callbacks per layer-id."""

    def __init__(self):
        self.projections = {}
        self.logits = {}

    def after_projection(self, layer, t, query, key, value):
        self.projections[layer.layer_id] = self.projections.get(layer.layer_id, 0) + 1

    def after_logits(self, layer, t, logits):
        self.logits[layer.layer_id] = self.logits.get(layer.layer_id, 0) + 1


class ConstantNoise(object):
    """Stub ε-network returning the same prediction for every input."""

    parameters = {}
    layers = {}

    def __init__(self, eps):
        self.eps = eps
        self.calls = []

    def __call__(self, z_t, t, hooks=None):
        self.calls.append((t, hooks))
        return self.eps


class TestCase(object):
    unet_options = TINY_UNET
    steps = 5

    @pytest.fixture(autouse=True)
    def setup_model(self):
        self.config = UNetConfig(self.unet_options)
        self.weights = UNetWeights.initialize(self.config, seed=0)
        self.noise = build_noise_schedule(self.config.T_train)
        self.rng = np.random.default_rng(1234)
        yield
        del self.weights

    def random_image(self):
        return random_image(self.rng, self.config.input_shape)


def trained_checkpoint():
    """Path of the checkpoint the trained-model suite runs against, or None."""
    return os.environ.get("ATTN_STYLE_CHECKPOINT")
