import math

import numpy as np
import pytest
from scipy import stats

from conbo.baselines import (
    QuadraticPolicy,
    joint_ei_next,
    knn_policy,
    nadaraya_watson,
    pg_action,
    pg_fit,
    pg_next,
    uniform_next,
)
from conbo.conditional import OuterBudget
from conbo.gp import Dataset, FactorizedMatern, fit_posterior

UNIT = (np.zeros(2), np.ones(2))


def test_uniform_next(rng):
    pts = np.array([uniform_next(UNIT, rng) for _ in range(10_000)])
    assert np.all((pts >= 0) & (pts <= 1))
    for k in range(2):
        assert stats.kstest(pts[:, k], "uniform").statistic < 1.63 / math.sqrt(len(pts))
    a = uniform_next(UNIT, np.random.default_rng(3))
    assert np.array_equal(a, uniform_next(UNIT, np.random.default_rng(3)))


def test_joint_ei_explores_away_from_single_observation(rng):
    spec = FactorizedMatern(1.0, [0.2], [0.2])
    data = Dataset([[0.5, 0.5]], [0.0], 1)
    post = fit_posterior(data, spec)
    p, _ = joint_ei_next(post, data, UNIT, OuterBudget(), rng)
    assert np.linalg.norm(p - 0.5) > 1e-3
    assert np.all((p >= 0) & (p <= 1))


def test_joint_ei_empty_data_falls_back(rng):
    spec = FactorizedMatern(1.0, [0.2], [0.2])
    p, hist = joint_ei_next(fit_posterior(Dataset.empty(1, 1), spec), Dataset.empty(1, 1), UNIT,
                            OuterBudget(), rng)
    assert hist is None and p.shape == (2,)


def test_joint_ei_deterministic():
    spec = FactorizedMatern(1.0, [0.2], [0.2], noise=1e-4)
    data = Dataset([[0.2, 0.3], [0.7, 0.6]], [0.1, 0.5], 1)
    post = fit_posterior(data, spec)
    a, _ = joint_ei_next(post, data, UNIT, OuterBudget(), np.random.default_rng(1))
    b, _ = joint_ei_next(post, data, UNIT, OuterBudget(), np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_joint_ei_converges_on_single_peak(rng):
    peak = np.array([0.3, 0.65])

    def f(p):
        return float(np.exp(-np.sum((p - peak) ** 2) / 0.08))

    spec = FactorizedMatern(1.0, [0.25], [0.25], noise=1e-6)
    X = rng.uniform(size=(4, 2))
    data = Dataset(X, [f(x) for x in X], 1)
    for _ in range(60):
        post = fit_posterior(data, spec)
        p, _ = joint_ei_next(post, data, UNIT, OuterBudget(n_steps=20), rng)
        data = data.append(p, [f(p)])
    best = data.inputs[np.argmax(data.outputs)]
    assert np.linalg.norm(best - peak) <= 1e-2


def test_knn_single_row():
    data = Dataset([[0.2, 0.7]], [1.0], 1)
    assert knn_policy(data, [0.9])[0] == 0.7


def test_knn_tie_goes_to_lowest_index():
    # two rows equidistant from s with equal reward: the first wins
    data = Dataset([[0.4, 0.1], [0.6, 0.9], [0.0, 0.5]], [1.0, 1.0, 0.0], 1)
    assert knn_policy(data, [0.5], k=2)[0] == 0.1


def test_knn_matches_brute_force(rng):
    X = rng.uniform(size=(60, 3))
    y = rng.normal(size=60)
    data = Dataset(X, y, 2)
    for s in rng.uniform(size=(10, 2)):
        d = [np.linalg.norm(x[:2] - s) for x in X]
        order = sorted(range(60), key=lambda i: (d[i], i))[:10]
        best = max(order, key=lambda i: y[i])
        assert np.array_equal(knn_policy(data, s), X[best, 2:])


def test_quadratic_policy_examples():
    zero = QuadraticPolicy.zeros(1, 1)
    assert pg_action(zero, [0.3])[0] == 0.5
    ident = QuadraticPolicy(np.zeros((1, 1, 1)), np.eye(1), np.zeros(1))
    for s in (0.1, 0.5, 0.85):
        assert pg_action(ident, [s])[0] == pytest.approx(s)
    steep = QuadraticPolicy(np.zeros((1, 1, 1)), 10 * np.eye(1), np.zeros(1))
    assert pg_action(steep, [0.9])[0] == 1.0


def _linear_best_data(rng, n=400, shift=0.0):
    S = rng.uniform(size=n)
    X = rng.uniform(size=n)
    y = -((X - S) ** 2) * 10 + shift
    return Dataset(np.c_[S, X], y, 1)


def test_pg_recovers_linear_policy(rng):
    pol = pg_fit(_linear_best_data(rng))
    grid = np.linspace(0.1, 0.9, 9)
    acts = np.array([pg_action(pol, [s])[0] for s in grid])
    assert np.max(np.abs(acts - grid)) <= 0.1


def test_pg_constant_rewards_give_zero_policy(rng):
    data = Dataset(rng.uniform(size=(20, 2)), np.full(20, 3.0), 1)
    pol = pg_fit(data)
    assert np.all(pol.A == 0) and np.all(pol.B == 0) and np.all(pol.C == 0)


def test_pg_invariant_to_reward_shift():
    a = pg_fit(_linear_best_data(np.random.default_rng(5)))
    b = pg_fit(_linear_best_data(np.random.default_rng(5), shift=7.0))
    grid = np.linspace(0.1, 0.9, 9)
    for s in grid:
        assert pg_action(a, [s])[0] == pytest.approx(pg_action(b, [s])[0], abs=1e-6)


def test_pg_needs_five_rows(rng):
    with pytest.raises(ValueError):
        pg_fit(Dataset(rng.uniform(size=(4, 2)), rng.normal(size=4), 1))


def test_nadaraya_watson_isolated_state():
    S = np.array([[0.0], [5.0], [5.1]])
    y = np.array([2.0, -1.0, 1.0])
    assert nadaraya_watson(S, y, S[:1])[0] == pytest.approx(2.0, abs=1e-12)
    w = np.exp(-0.5 * 0.01 / 0.04)
    assert nadaraya_watson(S, y, S[1:2])[0] == pytest.approx((-1 + w) / (1 + w), abs=1e-12)


def test_pg_next_in_bounds(rng):
    pol = QuadraticPolicy(np.zeros((1, 1, 1)), 10 * np.eye(1), np.zeros(1))
    for _ in range(200):
        a = pg_next(pol, [rng.uniform()], 1, rng)
        assert 0 <= a[0] <= 1
    assert pg_next(None, [0.5], 2, rng).shape == (2,)
