import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from conbo.acquisition import (
    InnerOptimizer,
    check_zgrid,
    expected_improvement,
    expected_improvement_grad,
    kg_d,
    kg_epigraph,
    kg_epigraph_grad,
    log_kg_epigraph,
    kg_hybrid,
    kg_mc,
    maximize_sampled_means,
    z_quantiles,
)
from conbo.gp import Dataset, FactorizedMatern, fit_posterior, make_lookahead

from conftest import random_gp


def mc_envelope(mu, sigma, z):
    """Monte-Carlo E[max(mu + sigma z)] - max(mu) with its standard error."""
    vals = np.max(mu[None, :] + np.outer(z, sigma), axis=1) - mu.max()
    return vals.mean(), vals.std() / math.sqrt(len(z))


def brute_envelope(mu, sigma):
    """Numerical quadrature of the envelope expectation on a fine z grid."""
    z = np.linspace(-12, 12, 400_001)
    f = np.max(mu[None, :] + np.outer(z, sigma), axis=1) * norm.pdf(z)
    return np.trapezoid(f, z) - mu.max()


ensembles = st.integers(1, 20).flatmap(
    lambda m: st.tuples(
        st.lists(st.floats(-3, 3), min_size=m, max_size=m),
        st.lists(st.floats(-2, 2), min_size=m, max_size=m),
    )
)


# epigraph


def test_epigraph_half_normal():
    assert kg_epigraph([0, 0], [0, 1]) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)


def test_epigraph_single_line():
    assert kg_epigraph([5.0], [3.0]) == 0.0


def test_epigraph_shifted_hinge(rng):
    expect = norm.pdf(1) - (1 - norm.cdf(1))
    assert kg_epigraph([1, 0], [0, 1]) == pytest.approx(expect, abs=1e-12)
    est, se = mc_envelope(np.array([1.0, 0.0]), np.array([0.0, 1.0]), rng.standard_normal(10**6))
    assert abs(kg_epigraph([1, 0], [0, 1]) - est) <= 3 * se


def test_epigraph_rejects_bad_input():
    with pytest.raises(ValueError):
        kg_epigraph([], [])
    with pytest.raises(ValueError):
        kg_epigraph([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        kg_epigraph([np.nan], [1.0])


def test_epigraph_matches_quadrature(rng):
    for _ in range(30):
        m = int(rng.integers(1, 21))
        mu, sigma = rng.normal(size=m), rng.normal(size=m)
        assert kg_epigraph(mu, sigma) == pytest.approx(brute_envelope(mu, sigma), abs=1e-8)


def test_epigraph_ties_and_duplicate_slopes():
    # three lines through one point and repeated slopes
    mu = np.array([0.0, 0.0, 0.0, -1.0, 0.5])
    sigma = np.array([-1.0, 0.0, 1.0, 1.0, 0.0])
    assert kg_epigraph(mu, sigma) == pytest.approx(brute_envelope(mu, sigma), abs=1e-8)


@settings(max_examples=300, deadline=None)
@given(ensembles)
def test_epigraph_nonnegative(ens):
    mu, sigma = map(np.array, ens)
    assert kg_epigraph(mu, sigma) >= -1e-12


@settings(max_examples=200, deadline=None)
@given(ensembles, st.randoms(use_true_random=False))
def test_epigraph_permutation_and_duplication(ens, rnd):
    mu, sigma = map(np.array, ens)
    base = kg_epigraph(mu, sigma)
    perm = list(range(len(mu)))
    rnd.shuffle(perm)
    assert kg_epigraph(mu[perm], sigma[perm]) == pytest.approx(base, abs=1e-12)
    k = rnd.randrange(len(mu))
    assert kg_epigraph(np.append(mu, mu[k]), np.append(sigma, sigma[k])) == pytest.approx(base, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(ensembles, st.floats(-5, 5), st.floats(0.1, 10))
def test_epigraph_shift_and_scale(ens, c, lam):
    mu, sigma = map(np.array, ens)
    base = kg_epigraph(mu, sigma)
    assert kg_epigraph(mu + c, sigma) == pytest.approx(base, abs=1e-10)
    assert kg_epigraph(lam * mu, lam * sigma) == pytest.approx(lam * base, rel=1e-9, abs=1e-12)


def test_epigraph_gradient(rng):
    for _ in range(20):
        m = int(rng.integers(2, 10))
        mu, sigma = rng.normal(size=m), rng.normal(size=m)
        _, dmu, dsig = kg_epigraph_grad(mu, sigma)
        h = 1e-6
        for i in range(m):
            e = np.zeros(m)
            e[i] = h
            num_mu = (kg_epigraph(mu + e, sigma) - kg_epigraph(mu - e, sigma)) / (2 * h)
            num_sig = (kg_epigraph(mu, sigma + e) - kg_epigraph(mu, sigma - e)) / (2 * h)
            assert dmu[i] == pytest.approx(num_mu, abs=1e-6)
            assert dsig[i] == pytest.approx(num_sig, abs=1e-6)


# z grid


def test_z_quantiles_five():
    z = z_quantiles(5)
    expect = [norm.ppf(p) for p in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert np.allclose(z, expect, atol=1e-12)
    assert z[2] == 0.0


@pytest.mark.parametrize("n", [3, 5, 7, 11, 51])
def test_z_quantiles_symmetric(n):
    z = z_quantiles(n)
    assert z[n // 2] == 0.0
    assert abs(z.sum()) <= 1e-12


@pytest.mark.parametrize("n", [0, 1, 2, 4])
def test_z_quantiles_rejects_even(n):
    with pytest.raises(ValueError):
        z_quantiles(n)


def test_check_zgrid():
    assert list(check_zgrid([1.0, 0.0, -1.0])) == [-1.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        check_zgrid([-1.0, 1.0])


# knowledge-gradient variants on a 1-D action toy


@pytest.fixture
def toy():
    spec = FactorizedMatern(1.0, [0.5], [0.15], noise=0.05, mean=0.0)
    X = np.array([[0.5, 0.1], [0.5, 0.35], [0.5, 0.6], [0.5, 0.9]])
    y = np.array([0.2, 0.8, 0.5, -0.3])
    post = fit_posterior(Dataset(X, y, 1), spec)
    ctx = make_lookahead(post, [0.5, 0.45])
    return post, ctx


def test_kg_d_trivial_cases(toy):
    post, ctx = toy
    assert kg_d(post, ctx, [0.5], [[0.3]]) == 0.0
    far = make_lookahead(post, [50.0, 50.0])
    assert kg_d(post, far, [0.5], np.linspace(0, 1, 20)[:, None]) == pytest.approx(0.0, abs=1e-12)


def test_kg_d_matches_monte_carlo(toy, rng):
    post, ctx = toy
    grid = np.linspace(0, 1, 200)[:, None]
    P = np.hstack([np.full_like(grid, 0.5), grid])
    est, se = mc_envelope(post.mean(P), ctx.sigma_tilde(P), rng.standard_normal(10**6))
    assert abs(kg_d(post, ctx, [0.5], grid) - est) <= 3 * se


def test_kg_mc_zero_draws(toy, rng):
    post, ctx = toy
    assert kg_mc(post, ctx, [0.5], 3, InnerOptimizer(), rng, z=np.zeros(3)) == 0.0


def test_kg_mc_zero_sigma(toy, rng):
    post, _ = toy
    far = make_lookahead(post, [50.0, 50.0])
    assert abs(kg_mc(post, far, [0.5], 20, InnerOptimizer(), rng)) <= 1e-6


def test_kg_mc_matches_dense_grid(toy, rng):
    post, ctx = toy
    grid = np.linspace(0, 1, 2000)[:, None]
    dense = kg_d(post, ctx, [0.5], grid)
    z = rng.standard_normal(2000)
    opt = InnerOptimizer(n_random=40, n_ascent=30)
    _, zero = maximize_sampled_means(post, ctx, [0.0], [0.5], opt, rng=np.random.default_rng(1))
    _, vals = maximize_sampled_means(post, ctx, z, [0.5], opt, rng=np.random.default_rng(2))
    diffs = vals - zero[0]
    est = kg_mc(post, ctx, [0.5], 2000, opt, np.random.default_rng(3), z=z)
    assert est == pytest.approx(diffs.mean(), abs=1e-6)
    assert abs(est - dense) <= 3 * diffs.std() / math.sqrt(len(z))


def test_lower_bound_ordering(toy, rng):
    post, ctx = toy
    # both grids must contain argmax mu for the ordering to hold
    fine = np.linspace(0, 1, 100_001)
    best = fine[np.argmax(post.mean(np.c_[np.full_like(fine, 0.5), fine]))]
    sparse = np.append(np.linspace(0, 1, 5), best)[:, None]
    dense = np.concatenate([np.linspace(0, 1, 400), sparse[:, 0]])[:, None]
    z = rng.standard_normal(5000)
    opt = InnerOptimizer(n_random=40, n_ascent=30)
    _, zero = maximize_sampled_means(post, ctx, [0.0], [0.5], opt, rng=np.random.default_rng(1))
    _, vals = maximize_sampled_means(post, ctx, z, [0.5], opt, rng=np.random.default_rng(2))
    mc, se = np.mean(vals - zero[0]), np.std(vals - zero[0]) / math.sqrt(len(z))
    a, b = kg_d(post, ctx, [0.5], sparse), kg_d(post, ctx, [0.5], dense)
    assert a <= b + 1e-12
    assert b <= mc + 3 * se
    hyb = kg_hybrid(post, ctx, [0.5], z_quantiles(5), opt, rng=np.random.default_rng(4))
    assert hyb <= mc + 3 * se


def test_kg_hybrid_nonnegative(rng):
    for _ in range(100):
        post = random_gp(rng, n=int(rng.integers(1, 10)), noise=rng.choice([0.0, 0.01, 0.1]))
        c = rng.uniform(size=2)
        state = rng.uniform(size=1)
        val = kg_hybrid(post, c, state, z_quantiles(5), InnerOptimizer(n_random=10, n_ascent=5),
                        rng=np.random.default_rng(int(rng.integers(1 << 30))))
        assert val >= -1e-9


def test_kg_hybrid_zero_at_observed_noiseless_point():
    spec = FactorizedMatern(1.0, [0.3], [0.3])
    post = fit_posterior(Dataset([[0.2, 0.3], [0.7, 0.8]], [0.0, 1.0], 1), spec)
    assert kg_hybrid(post, [0.2, 0.3], [0.2], z_quantiles(5), InnerOptimizer()) == 0.0
    assert kg_d(post, [0.2, 0.3], [0.2], [[0.1], [0.5]]) == 0.0


def test_sampled_mean_maximizer_finds_argmax(toy):
    post, ctx = toy
    grid = np.linspace(0, 1, 10_000)
    P = np.c_[np.full_like(grid, 0.5), grid]
    for z in (-1.0, 0.0, 1.3):
        target = grid[np.argmax(post.mean(P) + z * ctx.sigma_tilde(P))]
        pts, _ = maximize_sampled_means(post, ctx, [z], [0.5], InnerOptimizer(), rng=np.random.default_rng(0))
        assert pts[0, 1] == pytest.approx(target, abs=1e-2)


# expected improvement


def test_ei_trivial():
    spec = FactorizedMatern(1.0, [0.5], [0.5])
    post = fit_posterior(Dataset.empty(1, 1), spec)
    assert expected_improvement(post, [0.3, 0.3], 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)
    obs = fit_posterior(Dataset([[0.3, 0.3]], [0.0], 1), spec)
    assert expected_improvement(obs, [0.3, 0.3], 1.0) == pytest.approx(0.0, abs=1e-6)


def test_ei_matches_monte_carlo(rng):
    post = random_gp(rng, n=4)
    q = rng.uniform(size=2)
    m, v = post.mean(q), post.var(q)
    inc = m + 0.3
    samples = np.maximum(m + math.sqrt(v) * rng.standard_normal(10**6) - inc, 0)
    se = samples.std() / 1000
    assert abs(expected_improvement(post, q, inc) - samples.mean()) <= 3 * se


def test_ei_gradient(rng):
    post = random_gp(rng, n=5)
    Q = rng.uniform(0.1, 0.9, size=(10, 2))
    inc = float(post.data.outputs.max())
    val, g = expected_improvement_grad(post, Q, inc)
    assert np.allclose(val, expected_improvement(post, Q, inc))
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        num = (expected_improvement(post, Q + e, inc) - expected_improvement(post, Q - e, inc)) / (2 * h)
        assert np.allclose(g[:, i], num, atol=1e-5)


def test_log_epigraph_matches_value(rng):
    for _ in range(200):
        m = int(rng.integers(2, 12))
        mu, sigma = rng.normal(size=m), rng.normal(size=m)
        v = kg_epigraph(mu, sigma)
        if v > 1e-300:
            assert math.exp(log_kg_epigraph(mu, sigma)) == pytest.approx(v, rel=1e-10)
    assert log_kg_epigraph([1.0, 2.0], [0.5, 0.5]) == -math.inf


def test_log_epigraph_beyond_underflow():
    # two lines crossing at z = 60: the value underflows but its log is the Gaussian tail
    assert kg_epigraph([0.0, -60.0], [0.0, 1.0]) == 0.0
    u = mpmath.mpf(60)
    expect = float(mpmath.log(mpmath.npdf(u) - u * mpmath.ncdf(-u)))
    assert log_kg_epigraph([0.0, -60.0], [0.0, 1.0]) == pytest.approx(expect, abs=1e-9)
