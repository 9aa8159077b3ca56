"""Shared fixtures: small fixed-seed instances of the multinomial probit model."""

from pathlib import Path

import numpy as np
import pytest

from mnprobit.core.model import Dataset, MnpModel, build_design_expansion, simulate_dataset
from mnprobit.data.io import write_dataset


def random_pd(L: int, rng: np.random.Generator) -> np.ndarray:
    """Random well-conditioned covariance matrix."""
    A = rng.standard_normal((L, L))
    return A @ A.T / L + 0.5 * np.eye(L)


@pytest.fixture
def make_pd():
    return random_pd


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def small_model() -> MnpModel:
    """n=10, p=2, L=3 simulated instance with Sigma = I."""
    data, _ = simulate_dataset([0.5, -1.0, 1.0, 0.3], n=10, p=2, sigma=np.eye(3), seed=11)
    return MnpModel(data=data, sigma=np.eye(3), nu2=4.0)


@pytest.fixture
def single_obs_model() -> MnpModel:
    """One observation, L=3, p=2: the blocked approximation is exact here."""
    data = Dataset(y=np.array([2]), X=np.array([[1.0, -0.7]]), n_classes=3)
    sigma = np.array([[1.0, 0.3, 0.0], [0.3, 1.2, 0.2], [0.0, 0.2, 0.9]])
    return MnpModel(data=data, sigma=sigma, nu2=2.0)


@pytest.fixture
def zero_design_model() -> MnpModel:
    data = Dataset(y=np.array([1, 3, 2, 1]), X=np.zeros((4, 2)), n_classes=3)
    return MnpModel(data=data, sigma=np.eye(3), nu2=9.0)


@pytest.fixture
def small_expansion(small_model: MnpModel):
    return build_design_expansion(small_model)


@pytest.fixture
def dataset_file(tmp_path: Path) -> Path:
    """CSV of a 12-row, L=3, p=2 simulated dataset."""
    data, _ = simulate_dataset([0.8, -0.4, -0.6, 0.9], n=12, p=2, sigma=np.eye(3), seed=5)
    return write_dataset(data, tmp_path / "data.csv")
