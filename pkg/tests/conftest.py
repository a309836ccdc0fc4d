"""Fixture dùng chung: generator có seed, config thu nhỏ, dữ liệu tổng hợp."""

import numpy as np
import pytest

from application.dataset import ImageCache
from application.synthetic import SyntheticSpec, generate_synthetic
from application.vlm_model import LMConfig, VisionConfig, VLMModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vision():
    return VisionConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, num_heads=2)


@pytest.fixture
def tiny_lm():
    return LMConfig(embed_dim=16, depth=1, num_heads=2, context_len=128)


@pytest.fixture
def tiny_model(tiny_vision, tiny_lm):
    return VLMModel(tiny_vision, tiny_lm, seed=7)


@pytest.fixture
def synthetic_corpus():
    spec = SyntheticSpec(num_images=6, image_size=16, noise_seed=3)
    records, images = generate_synthetic(spec)
    return records, ImageCache(preloaded=images)
