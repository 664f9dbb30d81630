"""Shared fixtures: synthetic data, stub models and a small synthetic run directory."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from wmlab.data import make_synthetic_dataset
from wmlab.pipeline import RunConfig, run_pipeline

SYNTHETIC = "synthetic-6-60-8"

# Small but complete pipeline configuration on 6-class 8x8 synthetic blobs.
SYNTHETIC_CONFIG = {
    "data": {
        "task": {"source": SYNTHETIC, "limit": None, "offset": 0},
        "test": {"source": SYNTHETIC, "split": "test"},
        "transfer": {"source": SYNTHETIC, "limit": None, "offset": 0, "seed": 5},
        "attacker": {"source": SYNTHETIC, "limit": 200, "offset": 0, "seed": 7},
        "attacker_holdout": {"source": SYNTHETIC, "limit": 100, "offset": 200, "seed": 7},
    },
    "benign": {"epochs": 3, "batch_size": 32},
    "embedding": {"phase1": {"epochs": 2, "batch_size": 32, "seed": 1},
                  "phase2": {"epochs": 2, "batch_size": 32, "seed": 2}},
    "surrogate": {"epochs": 2, "batch_size": 32, "seed": 3},
    "attack": {"epochs": 1, "batch_size": 32, "seed": 4},
    "watermark": {"target_probe_count": 50, "holdout_count": 50},
    "keys": {"M": 20, "candidate_factor": 4},
}


class StubModel:
    """Callable returning fixed logits; ``rows`` maps sample id -> logits row.

    The sample id is read from the first pixel (scaled back to 0..255), so tests
    can build inputs whose predictions are fully scripted.
    """

    def __init__(self, rows, num_classes: int | None = None):
        self.rows = torch.as_tensor(np.asarray(rows, dtype=np.float32))
        self.num_classes = num_classes or self.rows.shape[1]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        ids = torch.round(x[:, 0, 0, 0] * 255).long()
        return self.rows[ids]


def one_hot_logits(classes, num_classes: int, scale: float = 10.0) -> np.ndarray:
    out = np.zeros((len(classes), num_classes), dtype=np.float32)
    out[np.arange(len(classes)), classes] = scale
    return out


def id_images(n: int, size: int = 4) -> np.ndarray:
    """uint8 images whose first pixel encodes the sample index (for StubModel)."""
    images = np.zeros((n, 1, size, size), dtype=np.uint8)
    images[:, 0, 0, 0] = np.arange(n)
    return images


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.call_report = rep


@pytest.fixture
def synthetic():
    return make_synthetic_dataset(num_classes=4, per_class=10, size=8, seed=0)


@pytest.fixture(scope="session")
def synthetic_config() -> RunConfig:
    return RunConfig.from_dict(SYNTHETIC_CONFIG)


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory, synthetic_config):
    """A completed pipeline run on synthetic data (read-only for tests)."""
    return run_pipeline(synthetic_config, tmp_path_factory.mktemp("runs") / "synthetic")
