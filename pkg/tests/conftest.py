# tests/conftest.py

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pytest

from services.cube_service import normalize, synthesize_cube


@pytest.fixture
def numeric_grad():
    """Central-difference gradient of a scalar callable w.r.t. an array it reads, perturbed in place."""

    def _numeric(fn, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        grad = np.zeros_like(array, dtype=np.float64)
        for idx in np.ndindex(array.shape):
            original = array[idx]
            array[idx] = original + eps
            plus = fn()
            array[idx] = original - eps
            minus = fn()
            array[idx] = original
            grad[idx] = (plus - minus) / (2.0 * eps)
        return grad

    return _numeric


@pytest.fixture
def synthetic_cube():
    return normalize(synthesize_cube(num_classes=3, size=16, bands=8, noise_sigma=0.05, seed=7))
