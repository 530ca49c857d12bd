"""Width-scalable conditional Branin and Rosenbrock.

The first native coordinate is the state and the second the action.  Both
inputs are given on [0, 1]; the state is squeezed towards the midline of its
native range by the width ``w`` so that ``w = 0`` leaves a single state.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar

from .base import ConditionalProblem, Density, OracleTable

NATIVE_BOUNDS = {
    "branin": ((-5.0, 10.0), (0.0, 15.0)),
    "rosenbrock": ((-2.0, 2.0), (-2.0, 2.0)),
}


def branin(a, b):
    c1 = 5.1 / (4 * np.pi**2)
    c2 = 5.0 / np.pi
    t = 1.0 / (8 * np.pi)
    return (b - c1 * a**2 + c2 * a - 6.0) ** 2 + 10.0 * (1 - t) * np.cos(a) + 10.0


def rosenbrock(a, b):
    return (1.0 - a) ** 2 + 100.0 * (b - a**2) ** 2


_FUNCS = {"branin": branin, "rosenbrock": rosenbrock}


def _check(name):
    if name not in _FUNCS:
        raise ValueError(f"unknown synthetic function {name!r}; expected one of {sorted(_FUNCS)}")


@lru_cache(maxsize=None)
def native_scale(name: str) -> float:
    """Standard deviation of the function over its native box (401 x 401 grid)."""
    _check(name)
    (a0, a1), (b0, b1) = NATIVE_BOUNDS[name]
    A, B = np.meshgrid(np.linspace(a0, a1, 401), np.linspace(b0, b1, 401))
    return float(np.std(_FUNCS[name](A, B)))


def to_native(name, w, s, x):
    """Map normalized (s, x) to native coordinates under width ``w``."""
    (a0, a1), (b0, b1) = NATIVE_BOUNDS[name]
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    s_w = 0.5 + w * (s - 0.5)
    return a0 + s_w * (a1 - a0), b0 + x * (b1 - b0)


def synthetic_mean(name: str, w: float, s, x):
    """Noise-free reward ``-f / sd(f)``."""
    _check(name)
    a, b = to_native(name, w, s, x)
    return -_FUNCS[name](a, b) / native_scale(name)


def synthetic_reward(name: str, w: float, s, x, noise_sd: float = 0.1, seed: int = 0) -> float:
    """One noisy reward at normalized state ``s`` and action ``x``."""
    _check(name)
    if not 0.0 <= w <= 1.0:
        raise ValueError("width must lie in [0, 1]")
    s = float(np.asarray(s).reshape(-1)[0])
    x = float(np.asarray(x).reshape(-1)[0])
    val = float(synthetic_mean(name, w, s, x))
    if noise_sd > 0:
        val += noise_sd * np.random.default_rng(seed).standard_normal()
    return val


def synthetic_oracle(name: str, w: float, states, grid: int = 2001) -> OracleTable:
    """Best action per state: a ``grid``-point scan refined by a bounded scalar search."""
    _check(name)
    S = np.asarray(states, dtype=float).reshape(-1)
    xs = np.linspace(0.0, 1.0, grid)
    acts, vals = [], []
    h = 1.0 / (grid - 1)
    for s in S:
        f = synthetic_mean(name, w, s, xs)
        i = int(np.argmax(f))
        best_x, best_f = xs[i], f[i]
        lo, hi = max(0.0, best_x - h), min(1.0, best_x + h)
        if hi > lo:
            res = minimize_scalar(lambda t: -synthetic_mean(name, w, s, t), bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-10})
            if -res.fun > best_f:
                best_x, best_f = float(res.x), float(-res.fun)
        acts.append(best_x)
        vals.append(best_f)
    return OracleTable(S[:, None], np.array(acts)[:, None], np.array(vals), grid, 0)


def make_synthetic(name: str, width: float = 1.0, density: str = "uniform", noise_sd: float = 0.1,
                   n_states: int | None = None) -> ConditionalProblem:
    """Conditional synthetic problem on the unit square.

    ``n_states`` restricts the state to that many equally spaced points.
    """
    _check(name)
    if not 0.0 <= width <= 1.0:
        raise ValueError("width must lie in [0, 1]")
    dens = Density(density, [0.0], [1.0])
    states = None
    if n_states:
        states = np.linspace(0.0, 1.0, n_states + 2)[1:-1] if n_states > 1 else np.array([0.5])
    return ConditionalProblem(
        name=name,
        action_lower=[0.0],
        action_upper=[1.0],
        density=dens,
        reward=lambda s, x, seed: synthetic_reward(name, width, s, x, noise_sd, seed),
        expected=lambda S, X: synthetic_mean(name, width, S[:, 0], X[:, 0]),
        noise=f"gaussian sd {noise_sd}",
        states=states,
        params={"width": width, "noise_sd": noise_sd},
    )
