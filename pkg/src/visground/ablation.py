"""Component ablation arms and the held-out trend protocol."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .data import generate_samples
from .model import GroundingModel, ModelConfig
from .train import TrainConfig, evaluate_model, fit_model

# each arm adds one component to the one before it
ARMS: dict[str, dict] = {
    "baseline": dict(num_stages=1, use_verification=False, use_context=False),
    "multistage": dict(num_stages=6, use_verification=False, use_context=False),
    "context": dict(num_stages=6, use_verification=False, use_context=True),
    "full": dict(num_stages=6, use_verification=True, use_context=True),
}

TRAIN_SIZE = 4000
EPOCHS = 30
TEST_SIZE = 500
TEST_SEED = 9_000_000


def train_seed(seed: int) -> int:
    """Base seed of the training set for a run; disjoint from the test range."""
    return 10_000 + 100_000 * seed


@dataclass
class ArmResult:
    arm: str
    seed: int
    accuracy: float
    per_stage: list[float]
    train_accuracy: float
    seconds: float


def run_arm(arm: str, seed: int, train_size: int = TRAIN_SIZE, epochs: int = EPOCHS, test=None) -> ArmResult:
    """Train one arm from scratch and score it on the held-out set."""
    model_cfg = ModelConfig(**ARMS[arm])
    config = TrainConfig(epochs=epochs, seed=seed, model=model_cfg)
    model = GroundingModel(model_cfg, seed=seed)
    start = time.perf_counter()
    history = fit_model(model, generate_samples(train_size, train_seed(seed)), config)
    held_out = test if test is not None else generate_samples(TEST_SIZE, TEST_SEED)
    result = evaluate_model(model, held_out)
    return ArmResult(arm, seed, result["acc@0.5"], result["per_stage_acc"], history[-1]["acc@0.5"],
                     time.perf_counter() - start)
