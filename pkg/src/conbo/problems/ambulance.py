"""Ambulances in a square: choose base locations for a day's demand.

Calls arrive around a demand mode ``s`` and each is served by its nearest
base at constant speed; the reward is the negative mean response time.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import ndtr, ndtri

from .base import ConditionalProblem, Density, OracleTable

MAP_SIZE = 30.0  # km
N_CALLS = 30
SIGMA_POP = 5.0  # km
SPEED = 1.0  # km per minute
N_BASES = 3
STATE_MEAN = (15.0, 15.0)
STATE_SD = (6.0, 6.0)


def _truncated_normal(mean, sd, lo, hi, u):
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    # work in the lower tail for accuracy
    flip = a > 0
    a2, b2 = np.where(flip, -b, a), np.where(flip, -a, b)
    t = ndtri(ndtr(a2) + u * (ndtr(b2) - ndtr(a2)))
    return np.clip(mean + sd * np.where(flip, -t, t), lo, hi)


@lru_cache(maxsize=4096)
def _uniforms(seed, n_calls):
    out = np.random.default_rng(seed).uniform(size=(n_calls, 2))
    out.flags.writeable = False
    return out


def call_locations(s, seeds, n_calls=N_CALLS, sigma_pop=SIGMA_POP):
    """Call coordinates (len(seeds), n_calls, 2) for demand mode ``s``.

    The uniforms depend on the seed only, so different modes share random numbers.
    """
    s = np.asarray(s, dtype=float).reshape(2)
    U = np.stack([_uniforms(int(k), n_calls) for k in np.atleast_1d(seeds)])
    return _truncated_normal(s, sigma_pop, 0.0, MAP_SIZE, U)


def response_times(calls, bases, speed=SPEED):
    """Minutes from the nearest base to each call; ``calls`` (..., 2), ``bases`` (k, 2)."""
    bases = np.asarray(bases, dtype=float).reshape(-1, 2)
    d = np.linalg.norm(calls[..., None, :] - bases, axis=-1)
    return d.min(axis=-1) / speed


def ambulance_batch(s, x, seeds, n_calls=N_CALLS, sigma_pop=SIGMA_POP, speed=SPEED):
    calls = call_locations(s, seeds, n_calls, sigma_pop)
    return -response_times(calls, x, speed).mean(axis=-1)


def ambulance_simulate(s, x, seed: int, n_calls=N_CALLS, sigma_pop=SIGMA_POP, speed=SPEED) -> float:
    """Negative mean response time (minutes) over one simulated day."""
    return float(ambulance_batch(s, x, [seed], n_calls, sigma_pop, speed)[0])


def _weiszfeld(points, start, iters=30):
    c = start
    for _ in range(iters):
        d = np.maximum(np.linalg.norm(points - c, axis=1), 1e-9)
        w = 1.0 / d
        c = (points * w[:, None]).sum(axis=0) / w.sum()
    return c


def best_bases(calls, rng, n_starts=40, iters=25):
    """Multi-start alternating assignment / Weiszfeld search for the k-median bases."""
    P = calls.reshape(-1, 2)
    best, best_cost = None, np.inf
    for _ in range(n_starts):
        B = P[rng.choice(len(P), size=N_BASES, replace=False)].copy()
        for _ in range(iters):
            d = np.linalg.norm(P[:, None, :] - B[None], axis=-1)
            lab = d.argmin(axis=1)
            newB = B.copy()
            for k in range(N_BASES):
                pts = P[lab == k]
                if len(pts):
                    newB[k] = _weiszfeld(pts, B[k], iters=5)
            if np.allclose(newB, B, atol=1e-7):
                break
            B = newB
        cost = np.linalg.norm(P[:, None, :] - B[None], axis=-1).min(axis=1).mean()
        if cost < best_cost:
            best, best_cost = B.copy(), cost
    return best, best_cost


def ambulance_oracle(states, reps: int = 1000, n_starts: int = 40, seed0: int = 0, seed: int = 0) -> OracleTable:
    """Best base locations per state on the ``reps``-day average (common random numbers)."""
    S = np.atleast_2d(states)
    rng = np.random.default_rng(seed)
    seeds = seed0 + np.arange(reps)
    acts, vals = [], []
    for s in S:
        calls = call_locations(s, seeds)
        B, cost = best_bases(calls, rng, n_starts)
        # canonical order keeps tables comparable
        B = B[np.lexsort((B[:, 1], B[:, 0]))]
        acts.append(np.clip(B.reshape(-1), 0.0, MAP_SIZE))
        vals.append(-cost / SPEED)
    return OracleTable(S, np.array(acts), np.array(vals), 0, reps)


def make_ambulance() -> ConditionalProblem:
    dens = Density("truncated_gaussian", [0.0, 0.0], [MAP_SIZE, MAP_SIZE], mean=STATE_MEAN, sd=STATE_SD)
    return ConditionalProblem(
        name="ambulance",
        action_lower=np.zeros(2 * N_BASES),
        action_upper=np.full(2 * N_BASES, MAP_SIZE),
        density=dens,
        reward=lambda s, x, seed: ambulance_simulate(s, x, seed),
        batch_reward=lambda s, x, seeds: ambulance_batch(s, x, seeds),
        noise="simulation",
    )
