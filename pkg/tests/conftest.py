import numpy as np
import pytest

from kdkit.model import ModelConfig, TransformerModel
from kdkit.tensor import no_grad


def tiny_config(**overrides) -> ModelConfig:
    settings = dict(num_layers=2, hidden_dim=8, num_heads=2, vocab_size=32, max_seq_len=16, num_labels=2)
    settings.update(overrides)
    return ModelConfig(**settings)


def tiny_model(seed: int = 0, stddev: float = 0.2, **overrides) -> TransformerModel:
    return TransformerModel(tiny_config(**overrides), seed=seed, dtype=np.float64, stddev=stddev)


def experiment_document(**overrides) -> dict:
    """A small but complete config document; sections in ``overrides`` replace the defaults."""
    document = {
        "name": "tiny",
        "seed": 0,
        "out": "runs/tiny",
        "verbose": False,
        "task": {"name": "patterns", "num_labels": 2, "n_train": 64, "n_dev": 32, "seq_len": 12, "vocab_size": 32},
        "teacher": {
            "model": {"num_layers": 4, "hidden_dim": 16, "num_heads": 2},
            "seed": 0,
            "schedule": {"steps": 4, "batch_size": 16},
        },
        "student": {"num_layers": 2, "hidden_dim": 8, "num_heads": 2},
        "objective": {"temperature": 2.0, "hard_weight": 0.5,
                      "terms": [{"kind": "hidden_mse", "strategy": "dilatation"}]},
        "schedule": {"steps": 4, "batch_size": 16},
    }
    document.update(overrides)
    return document


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def token_batch(rng):
    return rng.integers(4, 32, size=(2, 5))


@pytest.fixture
def teacher_model():
    return tiny_model(seed=11, num_layers=4, hidden_dim=12, num_heads=2)


@pytest.fixture
def student_model():
    return tiny_model(seed=7)


@pytest.fixture
def teacher_trace(teacher_model, token_batch):
    with no_grad():
        return teacher_model(token_batch)
