"""
Pytest Fixtures and Configuration

Provides shared fixtures for all tests including:
- Seeded random generators
- Tiny network layouts and DGPA models
- Small synthetic streams and experiment configs
"""

import os
import sys

import numpy as np
import pytest

# Add streamuq to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.config import validate_experiment_config
from models import LayerSpec, ShotRecord, SyntheticStreamConfig


# =============================================================================
# Environment Fixtures
# =============================================================================

@pytest.fixture(autouse=True)
def mock_environment(monkeypatch):
    """Set up test environment variables."""
    monkeypatch.setenv("ENVIRONMENT", "test")
    monkeypatch.setenv("LOG_LEVEL", "WARNING")
    monkeypatch.delenv("SENTRY_DSN", raising=False)


# =============================================================================
# Numeric Fixtures
# =============================================================================

@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_specs():
    """One conv block and one dense block: every layer kind appears once."""
    return [
        LayerSpec(kind="conv1d", filters=3, kernel_size=3, stride=1),
        LayerSpec(kind="maxpool1d", pool=2, stride=2),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", units=5),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dropout", rate=0.2),
    ]


@pytest.fixture
def tiny_model(tiny_specs):
    from services.dgpa import create_model

    return create_model(tiny_specs, (12, 2), n_features=32, seed=5)


def make_shot(shot_id: int, length: int = 40, n_channels: int = 2, seed: int = 0) -> ShotRecord:
    """Random shot whose target is a smooth function of the inputs."""
    rng = np.random.default_rng(seed + shot_id)
    inputs = rng.normal(size=(n_channels, length))
    target = np.tanh(inputs.sum(axis=0)) + 0.01 * rng.normal(size=length)
    return ShotRecord(shot_id=shot_id, inputs=inputs, target=target)


@pytest.fixture
def shot_factory():
    return make_shot


# =============================================================================
# Stream & Experiment Fixtures
# =============================================================================

@pytest.fixture
def small_stream_config():
    return SyntheticStreamConfig(
        n_shots=12,
        shot_length=40,
        n_channels=2,
        seed=3,
        drift_schedule=[{"shot_index": 8, "kind": "abrupt", "magnitude": 2.0}],
    )


def tiny_experiment(output_dir) -> dict:
    """A complete, tiny experiment config as a raw dict."""
    return {
        "output_dir": str(output_dir),
        "data": {
            "synthetic": {
                "n_shots": 14,
                "shot_length": 30,
                "n_channels": 2,
                "seed": 11,
                "drift_schedule": [{"shot_index": 10, "kind": "abrupt", "magnitude": 1.5}],
            }
        },
        "window": {"length": 8, "stride": 2, "train_stride": 2},
        "split": {"pretrain_shots": 8, "seed": 0},
        "network": {
            "conv_filters": [2],
            "dense_units": [4],
            "max_epochs": 2,
            "patience": 1,
            "learning_rate": 1e-3,
            "batch_size": 16,
        },
        "dgpa": {"n_features": 16},
        "calibration": {"min_windows": 10},
        "ensemble": {"buffer_schedule": [1, 3], "single_online_buffer": 2},
        "run": {"trials": 2, "master_seed": 4},
    }


@pytest.fixture(scope="session")
def experiment_raw_factory():
    return tiny_experiment


@pytest.fixture
def experiment_raw(tmp_path):
    return tiny_experiment(tmp_path / "results")


@pytest.fixture
def experiment_config(experiment_raw):
    return validate_experiment_config(experiment_raw)
