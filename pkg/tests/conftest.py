import numpy as np
import pytest

from conbo.gp import Dataset, FactorizedMatern, fit_posterior


def random_gp(rng, n=5, d_s=1, d_x=1, noise=0.01, amp=None):
    """A posterior on random data with random hyperparameters."""
    d = d_s + d_x
    spec = FactorizedMatern(
        amplitude=amp if amp is not None else rng.uniform(0.5, 2.0),
        state_lengthscales=rng.uniform(0.2, 0.6, d_s),
        action_lengthscales=rng.uniform(0.2, 0.6, d_x),
        noise=noise,
        mean=rng.normal(),
    )
    X = rng.uniform(size=(n, d))
    y = rng.normal(size=n)
    return fit_posterior(Dataset(X, y, d_s), spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
