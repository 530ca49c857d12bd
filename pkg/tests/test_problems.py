import math

import numpy as np
import pytest
from scipy import stats

from conbo.problems import (
    PROBLEMS,
    Density,
    OracleTable,
    build_oracle,
    make_problem,
    sample_state,
    state_density,
)
from conbo.problems.ambulance import ambulance_batch, ambulance_simulate, response_times
from conbo.problems.ato import MARGINS, RATES, ato_simulate, ato_trace
from conbo.problems.synthetic import synthetic_mean, synthetic_oracle, synthetic_reward


def rosenbrock(a, b):
    return (1 - a) ** 2 + 100 * (b - a * a) ** 2


def branin(a, b):
    return ((b - 5.1 / (4 * math.pi**2) * a * a + 5 / math.pi * a - 6) ** 2
            + 10 * (1 - 1 / (8 * math.pi)) * math.cos(a) + 10)


# densities


@pytest.mark.parametrize("kind", ["uniform", "triangular"])
def test_density_integrates_to_one_1d(kind):
    d = Density(kind, [0.5], [1.5])
    s = np.linspace(0.5, 1.5, 100_001)[:, None]
    assert np.trapezoid(d.pdf(s), s[:, 0]) == pytest.approx(1.0, abs=1e-3)


def test_truncated_gaussian_integrates_to_one():
    d = Density("truncated_gaussian", [0, 0], [30, 30], mean=[15, 15], sd=[6, 6])
    g = np.linspace(0, 30, 301)
    A, B = np.meshgrid(g, g, indexing="ij")
    vals = d.pdf(np.c_[A.ravel(), B.ravel()]).reshape(A.shape)
    assert np.trapezoid(np.trapezoid(vals, g, axis=1), g) == pytest.approx(1.0, abs=1e-3)


def test_density_examples():
    uni = Density("uniform", [0.5], [1.5])
    assert np.allclose(uni.pdf([[0.6], [1.0], [1.4]]), 1.0)
    tri = Density("triangular", [0.0], [1.0])
    assert tri.pdf([[0.0]])[0] == 0.0
    assert tri.pdf([[1.0]])[0] == pytest.approx(2.0)
    assert uni.pdf([[2.0]])[0] == 0.0


def test_state_density_out_of_bounds():
    p = make_problem("ato")
    assert state_density(p, [1.0]) == pytest.approx(1.0)
    assert state_density(p, [2.0]) == 0.0


def test_uniform_sampling_ks(rng):
    p = make_problem("ato")
    S = np.array([sample_state(p, rng) for _ in range(10_000)])[:, 0]
    stat = stats.kstest(S, stats.uniform(0.5, 1.0).cdf).statistic
    assert stat < 1.63 / math.sqrt(len(S))


def test_triangular_sampling_mean(rng):
    d = Density("triangular", [0.0], [1.0])
    S = d.sample(rng, 100_000)[:, 0]
    assert abs(S.mean() - 2 / 3) <= 3 * S.std() / math.sqrt(len(S))


def test_truncated_gaussian_sampling(rng):
    p = make_problem("ambulance")
    S = p.density.sample(rng, 100_000)
    assert np.all((S >= 0) & (S <= 30))
    # analytic mean of the symmetric truncation is the centre
    assert np.all(np.abs(S.mean(axis=0) - 15) <= 3 * S.std(axis=0) / math.sqrt(len(S)))


def test_quantile_grid():
    d = Density("uniform", [0.0], [1.0])
    assert np.allclose(d.quantile_grid(11)[:, 0], (np.arange(11) + 0.5) / 11)
    d2 = Density("uniform", [0, 0], [30, 30])
    assert d2.quantile_grid(3).shape == (9, 2)


# synthetic functions


def test_width_zero_ignores_state():
    vals = {synthetic_reward("branin", 0.0, s, 0.3, seed=7) for s in (0.0, 0.3, 1.0)}
    assert len(vals) == 1


def test_noise_free_deterministic():
    a = synthetic_reward("branin", 1.0, 0.2, 0.4, noise_sd=0.0, seed=1)
    b = synthetic_reward("branin", 1.0, 0.2, 0.4, noise_sd=0.0, seed=1)
    assert a == b


def test_rosenbrock_minimum_maps_to_zero():
    # native box [-2, 2]^2: a = b = 1 sits at normalized 0.75
    assert rosenbrock(1.0, 1.0) == 0.0
    assert synthetic_mean("rosenbrock", 1.0, 0.75, 0.75) == 0.0


def test_native_forms_match_closed_forms(rng):
    s, x = rng.uniform(size=2)
    ratio_r = synthetic_mean("rosenbrock", 1.0, s, x) / -rosenbrock(-2 + 4 * s, -2 + 4 * x)
    ratio_b = synthetic_mean("branin", 1.0, s, x) / -branin(-5 + 15 * s, 15 * x)
    # each function is divided by its own positive scale
    assert ratio_r > 0 and ratio_b > 0
    s2, x2 = rng.uniform(size=2)
    assert synthetic_mean("branin", 1.0, s2, x2) / -branin(-5 + 15 * s2, 15 * x2) == pytest.approx(ratio_b)


def test_synthetic_scale_is_unit_sd():
    g = np.linspace(0, 1, 401)
    S, X = np.meshgrid(g, g)
    assert np.std(synthetic_mean("branin", 1.0, S, X)) == pytest.approx(1.0, rel=1e-9)


def test_noise_variance():
    vals = np.array([synthetic_reward("rosenbrock", 1.0, 0.4, 0.6, noise_sd=0.1, seed=k) for k in range(10_000)])
    assert vals.var(ddof=1) == pytest.approx(0.01, rel=0.1)


def test_unknown_name():
    with pytest.raises(ValueError):
        synthetic_reward("hartmann", 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        make_problem("hartmann")


def test_oracle_width_zero_constant():
    t = synthetic_oracle("rosenbrock", 0.0, np.linspace(0.05, 0.95, 5))
    assert np.all(t.actions == t.actions[0])
    assert np.all(t.values == t.values[0])


def test_oracle_not_worse_than_grid(rng):
    states = rng.uniform(size=7)
    t = synthetic_oracle("branin", 1.0, states)
    grid = np.linspace(0, 1, 2001)
    for s, v in zip(states, t.values):
        best = synthetic_mean("branin", 1.0, s, grid).max()
        assert best - 1e-12 <= v <= best + 1e-6
        assert v >= synthetic_mean("branin", 1.0, s, rng.uniform(size=50)).max()


def test_oracle_table_round_trip(tmp_path):
    t = synthetic_oracle("branin", 1.0, np.array([0.1, 1 / 3, 0.9]))
    path = tmp_path / "o.csv"
    t.write(path)
    back = OracleTable.read(path)
    assert open(path).readline().strip() == "s_0,xstar_0,fstar,grid_res,reps"
    assert np.array_equal(back.states, t.states)
    assert np.array_equal(back.actions, t.actions)
    assert np.array_equal(back.values, t.values)
    assert back.matches(t.states)


# ambulance


def test_ambulance_co_located():
    x = np.tile([15.0, 15.0], 3)
    r = ambulance_simulate([15.0, 15.0], x, seed=3, sigma_pop=1e-3)
    assert -0.1 < r <= 0.0


def test_ambulance_permutation_invariance():
    x = np.array([3.0, 4.0, 20.0, 10.0, 12.0, 25.0])
    perm = x.reshape(3, 2)[[2, 0, 1]].reshape(-1)
    for seed in range(5):
        assert ambulance_simulate([10.0, 12.0], x, seed) == ambulance_simulate([10.0, 12.0], perm, seed)


def test_ambulance_distance_over_speed():
    t = response_times(np.array([[30.0, 30.0]]), [[0.0, 0.0]])
    assert t[0] == pytest.approx(math.sqrt(1800.0))


def test_ambulance_deterministic_and_batched():
    x = np.array([5.0, 5.0, 15.0, 15.0, 25.0, 25.0])
    batch = ambulance_batch([12.0, 18.0], x, [1, 2, 3])
    assert np.array_equal(batch, [ambulance_simulate([12.0, 18.0], x, k) for k in (1, 2, 3)])


# assemble to order


def test_ato_zero_stock():
    assert ato_simulate([1.0], np.zeros(8), seed=4) == 0.0


def test_ato_zero_demand_holding():
    x = np.array([1.4, 2.6, 3, 4, 5, 6, 7, 8.2])
    expect = -30 * 0.05 * np.rint(x).sum()
    assert ato_simulate([0.0], x, seed=4) == pytest.approx(expect)


def test_ato_order_counts_grow_with_demand():
    x = np.full(8, 20.0)
    _, hi = ato_trace([1.5], x, seed=11)
    _, lo = ato_trace([0.5], x, seed=11)
    assert hi > lo
    # expected counts are 30 days times the scaled total rate
    assert hi == pytest.approx(30 * 1.5 * sum(RATES), rel=0.15)
    assert len(MARGINS) == 8


def test_ato_holding_cost_monotone():
    x = np.full(8, 12.0)
    vals = [ato_simulate([1.0], x, seed=5, h=h) for h in (0.0, 0.05, 0.2)]
    assert vals[0] >= vals[1] >= vals[2]


def test_ato_reproducible():
    x = np.arange(8) + 3.0
    assert ato_simulate([0.9], x, 17) == ato_simulate([0.9], x, 17)


# problem objects


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_unit_round_trip_and_bounds(name, rng):
    p = make_problem(name)
    U = rng.uniform(size=(5, p.d_s + p.d_x))
    assert np.allclose(p.to_unit(p.from_unit(U)), U)
    v = p.evaluate_unit(U[0], seed=3)
    assert np.isfinite(v) and v == p.evaluate_unit(U[0], seed=3)


def test_unit_state_space_density_is_normalized():
    space = make_problem("ambulance").unit_state_space()
    g = np.linspace(0, 1, 201)
    A, B = np.meshgrid(g, g, indexing="ij")
    vals = space.pdf(np.c_[A.ravel(), B.ravel()]).reshape(A.shape)
    assert np.trapezoid(np.trapezoid(vals, g, axis=1), g) == pytest.approx(1.0, abs=2e-3)


def test_finite_synthetic_states():
    p = make_problem("branin", n_states=3)
    assert p.finite
    assert np.allclose(p.states[:, 0], [0.25, 0.5, 0.75])
    assert np.allclose(p.state_probs(), 1 / 3)


def test_conditional_structure_of_simulators():
    amb = make_problem("ambulance")
    t = build_oracle(amb, np.array([[8.0, 8.0], [22.0, 22.0]]), reps=100)
    assert np.linalg.norm(t.actions[0] - t.actions[1]) > 1.0
    ato = make_problem("ato")
    t = build_oracle(ato, np.array([[0.55], [1.45]]), reps=100)
    assert np.abs(t.actions[0] - t.actions[1]).max() >= 1.0
