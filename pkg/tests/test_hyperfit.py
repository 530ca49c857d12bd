import warnings

import numpy as np
import pytest
from scipy.optimize import approx_fprime

from conbo.gp import Dataset, FactorizedMatern, TrendPlusOffset
from conbo.hyperfit import HyperparameterWarning, _Objective, fit_hyperparameters, log_marginal_likelihood


def draw_gp(rng, spec, X):
    K = spec(X, X) + spec.noise * np.eye(len(X))
    return spec.mean + np.linalg.cholesky(K) @ rng.standard_normal(len(X))


def test_lml_matches_dense_formula(rng):
    spec = FactorizedMatern(1.2, [0.4], [0.3], noise=0.05, mean=0.3)
    X = rng.uniform(size=(10, 2))
    y = rng.normal(size=10)
    K = spec(X, X) + 0.05 * np.eye(10)
    r = y - 0.3
    _, logdet = np.linalg.slogdet(K)
    expect = -0.5 * r @ np.linalg.solve(K, r) - 0.5 * logdet - 5 * np.log(2 * np.pi)
    assert log_marginal_likelihood(Dataset(X, y, 1), spec) == pytest.approx(expect, rel=1e-8)


@pytest.mark.parametrize("family,d_s", [("matern", 1), ("matern", 2), ("trend_offset", 1)])
def test_objective_gradient(rng, family, d_s):
    X = rng.uniform(size=(12, d_s + 1))
    if family == "trend_offset":
        X[:, 0] = rng.integers(0, 3, 12)
    obj = _Objective(X, rng.normal(size=12), family, d_s)
    theta = rng.uniform(-1.5, 0.5, len(obj.names))
    _, g = obj(theta)
    num = approx_fprime(theta, lambda t: obj(t)[0], 1e-6)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-4)


def test_fit_recovers_scale(rng):
    truth = FactorizedMatern(4.0, [0.5], [0.2], noise=0.01, mean=2.0)
    X = rng.uniform(size=(60, 2))
    y = draw_gp(rng, truth, X)
    spec = fit_hyperparameters(Dataset(X, y, 1), input_bounds=(np.zeros(2), np.ones(2)), seed=1)
    fitted = log_marginal_likelihood(Dataset(X, y, 1), spec)
    assert fitted >= log_marginal_likelihood(Dataset(X, y, 1), truth) - 1.0
    assert 0.05 < spec.action_lengthscales[0] < 0.6
    assert 0.5 < spec.amplitude < 40


def test_fit_in_caller_units(rng):
    # rescaling inputs and outputs rescales the fitted kernel accordingly
    X = rng.uniform(size=(25, 2))
    y = np.sin(6 * X[:, 1]) + X[:, 0]
    a = fit_hyperparameters(Dataset(X, y, 1), input_bounds=(np.zeros(2), np.ones(2)), seed=3)
    b = fit_hyperparameters(Dataset(10 * X, 5 * y + 1, 1), input_bounds=(np.zeros(2), 10 * np.ones(2)), seed=3)
    assert np.allclose(b.lengthscales, 10 * a.lengthscales, rtol=1e-4)
    assert b.amplitude == pytest.approx(25 * a.amplitude, rel=1e-4)
    assert b.mean == pytest.approx(5 * a.mean + 1, rel=1e-4)


def test_trend_offset_fit(rng):
    S = np.repeat([0.0, 1.0, 2.0], 8)[:, None]
    x = rng.uniform(size=(24, 1))
    y = np.sin(5 * x[:, 0]) + 0.5 * S[:, 0]
    spec = fit_hyperparameters(Dataset(np.hstack([S, x]), y, 1), "trend_offset", seed=0)
    assert isinstance(spec, TrendPlusOffset)


def test_fit_errors(rng):
    with pytest.raises(ValueError):
        fit_hyperparameters(Dataset(rng.uniform(size=(2, 2)), [0.0, 1.0], 1))
    with pytest.raises(ValueError):
        fit_hyperparameters(Dataset(rng.uniform(size=(5, 2)), rng.normal(size=5), 1), "rbf")


def test_constant_data_warns_or_fits(rng):
    X = rng.uniform(size=(6, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HyperparameterWarning)
        spec = fit_hyperparameters(Dataset(X, np.full(6, 3.0), 1))
    assert spec.mean == pytest.approx(3.0)
