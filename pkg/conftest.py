"""Shared fixtures: clean KD_* environment, tiny datasets and a finite-difference checker."""

from typing import Callable, Dict, List

import numpy as np
import pytest

from app.data import GenSpec, generate
from app.tensor import Tape, Tensor


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    """Tests never see a developer's KD_* settings."""
    for name in ("KD_LOG_LEVEL", "KD_JOBS", "KD_BATCH_SIZE", "KD_EPOCHS", "KD_RECORD_TIMING"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("KD_OUTPUT_DIR", str(tmp_path / "runs"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> GenSpec:
    return GenSpec(num_classes=4, samples_per_class=40, feature_dim=8, class_separation=1.5, noise=0.5, seed=3)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def tiny_image_dataset():
    spec = GenSpec(num_classes=3, samples_per_class=20, kind="image", image_side=8, with_val=False, noise=0.3, seed=5)
    return generate(spec)


@pytest.fixture
def quick_schedule() -> Dict[str, float]:
    return {"epochs": 3, "batch_size": 16, "lr_max": 3e-3, "lr_min": 1e-5}


def numeric_gradients(loss_fn: Callable[[List[Tensor]], Tensor], arrays: List[np.ndarray], eps: float = 1e-6) -> List[np.ndarray]:
    """Central differences of loss_fn w.r.t. every element of every array."""
    grads = []
    for array in arrays:
        grad = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            saved = array[index]
            array[index] = saved + eps
            plus = loss_fn([Tensor(a) for a in arrays]).item()
            array[index] = saved - eps
            minus = loss_fn([Tensor(a) for a in arrays]).item()
            array[index] = saved
            grad[index] = (plus - minus) / (2 * eps)
        grads.append(grad)
    return grads


def analytic_gradients(loss_fn: Callable[[List[Tensor]], Tensor], arrays: List[np.ndarray]) -> List[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = loss_fn(tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


@pytest.fixture
def grad_check():
    """Assert analytic and central-difference gradients agree to 1e-4 relative error."""

    def check(loss_fn, arrays, tolerance: float = 1e-4):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        analytic = analytic_gradients(loss_fn, arrays)
        numeric = numeric_gradients(loss_fn, arrays)
        for i, (a, n) in enumerate(zip(analytic, numeric)):
            error = max_relative_error(a, n)
            assert error < tolerance, f"input {i}: relative error {error:.2e}"

    return check
