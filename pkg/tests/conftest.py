import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from endiv import Dataset, save_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def small_dataset(rng):
    n, p, K = 60, 3, 4
    Z = rng.standard_normal((n, K))
    X = Z[:, :p] + 0.5 * rng.standard_normal((n, p))
    beta = np.array([1.0, -0.5, 0.0])
    y = X @ beta + 0.3 * rng.standard_normal(n)
    return Dataset(y=y, X=X, Z=Z)


@pytest.fixture
def csv_path(tmp_path, small_dataset):
    path = tmp_path / "data.csv"
    save_dataset(small_dataset, path)
    return path
