"""Non-conditional data collection and non-GP policies.

All functions work on unit-cube coordinates with the state in the first
``d_s`` columns, as the experiment harness does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .acquisition import expected_improvement_grad
from .conditional import OuterBudget, optimize_acquisition
from .gp import Dataset, GpPosterior

PG_NOISE = 0.2
PG_BANDWIDTH = 0.2


def uniform_next(bounds, rng: np.random.Generator) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return lo + rng.uniform(size=lo.size) * (hi - lo)


def joint_ei_next(post: GpPosterior, data: Dataset, bounds, budget: OuterBudget, rng,
                  previous=None, state=None):
    """Maximize EI over the joint box, treating states as actions.

    With ``state`` given, only the action coordinates move (used for the
    final per-state allocation).  Returns ``(point, history)``.
    """
    if len(data) == 0:
        return uniform_next(bounds, rng), None
    incumbent = float(np.max(data.outputs))

    def value_fn(P, _rng):
        return expected_improvement_grad(post, P, incumbent)

    choices = None if state is None else np.atleast_2d(state)
    return optimize_acquisition(value_fn, bounds, budget, rng, previous=previous,
                                state_choices=choices, d_s=data.d_s)


def knn_policy(data: Dataset, s, k: int = 10) -> np.ndarray:
    """Action of the best-rewarded row among the ``k`` nearest training states.

    Ties in distance go to the lower row index.
    """
    if len(data) == 0:
        raise ValueError("knn_policy needs at least one observation")
    ds = data.d_s
    S = data.inputs[:, :ds]
    d = np.linalg.norm(S - np.asarray(s, dtype=float).reshape(1, ds), axis=1)
    k = min(k, len(data))
    near = np.argsort(d, kind="stable")[:k]
    best = near[np.argmax(data.outputs[near])]
    return data.inputs[best, ds:].copy()


@dataclass(frozen=True)
class QuadraticPolicy:
    """Mean action ``s^T A s + B s + C`` in centred coordinates ([-0.5, 0.5])."""

    A: np.ndarray  # (d_x, d_s, d_s)
    B: np.ndarray  # (d_x, d_s)
    C: np.ndarray  # (d_x,)
    noise: float = PG_NOISE

    @classmethod
    def zeros(cls, d_s: int, d_x: int) -> "QuadraticPolicy":
        return cls(np.zeros((d_x, d_s, d_s)), np.zeros((d_x, d_s)), np.zeros(d_x))

    @classmethod
    def from_theta(cls, theta, d_s, d_x):
        T = np.asarray(theta).reshape(d_x, d_s * d_s + d_s + 1)
        return cls(T[:, : d_s * d_s].reshape(d_x, d_s, d_s), T[:, d_s * d_s: -1], T[:, -1])

    def mean(self, S_centred) -> np.ndarray:
        S = np.atleast_2d(S_centred)
        return np.einsum("ma,kab,mb->mk", S, self.A, S) + S @ self.B.T + self.C


def _features(S):
    quad = np.einsum("ma,mb->mab", S, S).reshape(len(S), -1)
    return np.hstack([quad, S, np.ones((len(S), 1))])


def nadaraya_watson(S_train, y, S_query, bandwidth=PG_BANDWIDTH):
    """Kernel-weighted average of ``y`` with a Gaussian kernel of the given bandwidth."""
    d2 = np.sum((np.atleast_2d(S_query)[:, None, :] - S_train[None]) ** 2, axis=-1)
    w = np.exp(-0.5 * d2 / bandwidth**2)
    return (w @ y) / w.sum(axis=1)


def pg_fit(data: Dataset, n_starts: int = 5, seed: int = 0) -> QuadraticPolicy:
    """Fit a quadratic Gaussian policy by maximizing the expected advantage.

    The objective is ``sum_i N(x_i; mu_theta(s_i), 0.2^2 I) * (y_i - V(s_i))``
    with ``V`` a Nadaraya-Watson regression of the standardized rewards on the
    states.  Starts are the zero policy plus small random perturbations.
    """
    if len(data) < 5:
        raise ValueError("pg_fit needs at least 5 observations")
    ds = data.d_s
    dx = data.dim - ds
    S = data.inputs[:, :ds] - 0.5
    X = data.inputs[:, ds:] - 0.5
    sd = np.std(data.outputs)
    if not sd > 0:
        return QuadraticPolicy.zeros(ds, dx)
    y = (data.outputs - np.mean(data.outputs)) / sd
    adv = y - nadaraya_watson(S, y, S)
    F = _features(S)
    var = PG_NOISE**2
    norm = (2 * np.pi * var) ** (-dx / 2)

    def negobj(theta):
        T = theta.reshape(dx, -1)
        r = X - F @ T.T
        p = norm * np.exp(-0.5 * np.sum(r * r, axis=1) / var)
        coef = adv * p
        grad = (coef[:, None] * r / var).T @ F
        return -np.sum(coef), -grad.reshape(-1)

    rng = np.random.default_rng(seed)
    size = dx * F.shape[1]
    best = np.zeros(size)
    best_f, _ = negobj(best)
    for k in range(n_starts):
        start = np.zeros(size) if k == 0 else 0.1 * rng.standard_normal(size)
        res = minimize(negobj, start, jac=True, method="L-BFGS-B")
        if np.isfinite(res.fun) and res.fun < best_f - 1e-12:
            best, best_f = res.x, res.fun
    return QuadraticPolicy.from_theta(best, ds, dx)


def pg_action(policy: QuadraticPolicy, s) -> np.ndarray:
    """Mean action on the unit cube, clipped to it."""
    S = np.atleast_2d(np.asarray(s, dtype=float)) - 0.5
    out = np.clip(policy.mean(S) + 0.5, 0.0, 1.0)
    return out[0] if np.ndim(s) <= 1 else out


def pg_next(policy: QuadraticPolicy | None, state, d_x: int, rng, epsilon: float = 0.2) -> np.ndarray:
    """Epsilon-greedy action around the current policy (uniform when no policy yet)."""
    if policy is None or rng.uniform() < epsilon:
        return rng.uniform(size=d_x)
    return pg_action(policy, state)
