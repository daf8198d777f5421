import os

import hypothesis
import numpy as np
import pytest

from src.core import model_zoo, scene_synth

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_model():
    """TinyCNN topology at toy width on 3x8x8 inputs with 3 classes"""
    return model_zoo.build_tiny_cnn((3, 8, 8), 3, seed=0, widths=(4, 4))


@pytest.fixture(scope="session")
def tiny_input():
    return np.random.default_rng(1).uniform(0.0, 1.0, size=(3, 8, 8))


@pytest.fixture(scope="session")
def small_scene_config():
    return scene_synth.SceneConfig(height=16, width=16, num_classes=3, seed=0)


@pytest.fixture(scope="session")
def small_dataset(small_scene_config):
    return scene_synth.generate_dataset(small_scene_config, 12)


@pytest.fixture(scope="session")
def scene_model(small_scene_config):
    return model_zoo.build_tiny_cnn((3, 16, 16), 3, seed=3, widths=(4, 4))


@pytest.fixture(scope="session")
def eager_model(scene_model):
    """scene_model with a large output bias: every class is predicted present"""
    params = scene_model.parameters()
    return scene_model.with_parameters(params[:-1] + [params[-1] + 10.0])
