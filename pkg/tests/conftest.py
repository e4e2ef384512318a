import os
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

import config
from services import tensor_core as tc


@pytest.fixture(autouse=True)
def _reset_precision():
    tc.set_precision(32)
    yield
    tc.set_precision(32)


@pytest.fixture
def float64():
    """Run the test with 64-bit elements."""
    tc.set_precision(64)
    yield np.float64


@pytest.fixture
def rng():
    return tc.Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(42)


def central_difference(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of the scalar f() with respect to x, perturbing x in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        plus = f()
        x[idx] = orig - eps
        minus = f()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def numgrad():
    return central_difference


@pytest.fixture
def relerr():
    return rel_error


@pytest.fixture
def data_dir() -> Path:
    value = os.environ.get(config.DATA_DIR_ENV)
    if not value or not Path(value).is_dir():
        pytest.skip(f"${config.DATA_DIR_ENV} does not point at a dataset directory")
    return Path(value)
