import numpy as np
import pytest

from postres.data import ExperimentalSample, PopulationSample


def make_pair(seed=0, n=400, N=3000, d=2, shift=0.4, noise=1.0, tau=1.0, p=0.5):
    """Linear-outcome experiment/population pair with a mean shift in X."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) + shift
    Xp = rng.standard_normal((N, d))
    beta = np.arange(1, d + 1, dtype=float)
    T = np.zeros(n)
    T[rng.permutation(n)[: int(round(p * n))]] = 1.0
    y = X @ beta + tau * T + noise * rng.standard_normal(n)
    yp = Xp @ beta + noise * rng.standard_normal(N)
    names = tuple(f"x{j}" for j in range(d))
    return ExperimentalSample(X, names, T, y), PopulationSample(Xp, names, yp)


@pytest.fixture
def pair():
    return make_pair()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
