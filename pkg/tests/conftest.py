"""
Pytest configuration and shared fixtures for all tests.

This file contains tiny configurations, tiny randomly initialised models and
small datasets that can be used across all test files.
"""

import numpy as np
import pytest

from cvae import CvaeConfig, init_cvae
from didactic_sim import SimConfig, generate_dataset
from risk_biaser import BiasTrainConfig, init_biaser
from store import ArtifactStore
from streams import scene_rng

PAST_STEPS = 3
FUTURE_STEPS = 4


@pytest.fixture
def rng():
    """Create a fresh seeded generator for each test."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_sim():
    """Create a short-horizon simulator configuration."""
    return SimConfig(past_steps=PAST_STEPS, future_steps=FUTURE_STEPS)


@pytest.fixture
def tiny_dataset(tiny_sim):
    """Create a small dataset of 16 scenes."""
    return generate_dataset(16, tiny_sim, seed=7, threads=1)


@pytest.fixture
def cvae_config():
    """Create a tiny CVAE configuration with a 2-D latent space."""
    return CvaeConfig(hidden_dim=8, num_layers=2, latent_dim=2, epochs=2, batch_size=8, log_interval=1)


@pytest.fixture
def tiny_cvae(cvae_config):
    """Create a randomly initialised CVAE for each test."""
    return init_cvae(cvae_config, PAST_STEPS, FUTURE_STEPS, scene_rng(0, "test-cvae"), dt=0.1)


@pytest.fixture
def bias_config():
    """Create a tiny biased-encoder training configuration."""
    return BiasTrainConfig(
        hidden_dim=8,
        num_layers=2,
        epochs=2,
        batch_size=8,
        target_samples_phase1=8,
        target_samples_phase2=16,
        inner_samples=4,
    )


@pytest.fixture
def tiny_biaser(tiny_cvae, bias_config):
    """Create a freshly initialised biased encoder (zero residual over the prior)."""
    return init_biaser(tiny_cvae, bias_config, scene_rng(0, "test-biaser"))


@pytest.fixture
def trained_biaser(tiny_biaser):
    """Create a biased encoder with small random residual weights."""
    gen = scene_rng(0, "test-biaser-weights")
    params = {name: value + 0.1 * gen.standard_normal(value.shape) for name, value in tiny_biaser.parameters().items()}
    return tiny_biaser.with_parameters(params)


@pytest.fixture
def store(tmp_path):
    """Create an artifact store rooted in a temporary directory."""
    return ArtifactStore(tmp_path / "run")
