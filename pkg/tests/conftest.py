import numpy as np
import pytest

from saecmse.families import FamilyKind, mean_link, sample_dataset
from saecmse.model import AreaObservation, Dataset, Hyperparameters
from saecmse.util import rng_stream

ALL_FAMILIES = [FamilyKind.GAUSSIAN, FamilyKind.POISSON_GAMMA, FamilyKind.BINOMIAL_BETA]


def make_dataset(family, y, n, X, prefix="a"):
    width = max(2, len(str(len(y))))
    areas = [
        AreaObservation(f"{prefix}{i:0{width}d}", float(yi), float(ni), np.asarray(xi, dtype=float))
        for i, (yi, ni, xi) in enumerate(zip(y, n, X))
    ]
    return Dataset(areas, family)


def simulate_dataset(family, m, n, beta, nu, seed, covariate=False):
    """Deterministic synthetic dataset at known hyperparameters."""
    rng = rng_stream(seed, 101, family.code)
    if covariate:
        X = np.column_stack([np.ones(m), rng.normal(scale=0.5, size=m)])
    else:
        X = np.ones((m, 1))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    prior_mean = np.array([mean_link(family, float(x @ beta)) for x in X])
    n_vec = np.full(m, float(n))
    _, y = sample_dataset(family, n_vec, prior_mean, nu, rng)
    return make_dataset(family, y, n_vec, X)


def random_valid_params(family, rng):
    """One random (y, n, m, nu) tuple inside the family's domain."""
    n = float(rng.integers(2, 60))
    nu = float(rng.uniform(0.5, 60.0))
    if family is FamilyKind.GAUSSIAN:
        return float(rng.normal()), float(rng.uniform(0.2, 50.0)), float(rng.normal()), nu
    if family is FamilyKind.POISSON_GAMMA:
        z = float(rng.integers(0, 40))
        return z / n, n, float(rng.uniform(0.05, 8.0)), nu
    z = float(rng.integers(0, int(n) + 1))
    return z / n, n, float(rng.uniform(0.03, 0.97)), nu


@pytest.fixture(scope="session")
def pg_dataset():
    return simulate_dataset(FamilyKind.POISSON_GAMMA, 40, 10.0, [0.0], 15.0, seed=11)


@pytest.fixture(scope="session")
def bb_dataset():
    return simulate_dataset(FamilyKind.BINOMIAL_BETA, 40, 10.0, [0.0], 15.0, seed=12)


@pytest.fixture(scope="session")
def fh_dataset():
    return simulate_dataset(FamilyKind.GAUSSIAN, 50, 2.0, [0.5, -0.3], 1.0, seed=13, covariate=True)


@pytest.fixture
def eta_pg():
    return Hyperparameters(np.array([0.0]), 15.0)
