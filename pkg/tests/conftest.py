"""Shared fixtures.  The default-configuration training run is expensive
(minutes), so the acceptance criteria that need a trained model share one
session-scoped run and its measured wall-clock time."""

import time
from dataclasses import dataclass

import pytest

from flowtts.model import ModelConfig, ModelState, init_model_state
from flowtts.pipeline import TrainConfig, default_synthetic_spec, train


@dataclass
class TrainedRun:
    state: ModelState
    history: list
    elapsed_seconds: float
    model_config: ModelConfig
    train_config: TrainConfig


@pytest.fixture(scope="session")
def trained_default() -> TrainedRun:
    """Train the default model on the default synthetic oracle, once."""
    model_config = ModelConfig()
    train_config = TrainConfig()
    state = init_model_state(model_config, seed=train_config.seed)
    spec = default_synthetic_spec(model_config)
    start = time.perf_counter()
    state, history = train(train_config, spec, state)
    elapsed = time.perf_counter() - start
    return TrainedRun(state=state, history=history, elapsed_seconds=elapsed,
                      model_config=model_config, train_config=train_config)
