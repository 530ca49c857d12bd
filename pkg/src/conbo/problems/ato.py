"""Assemble-to-order inventory with base-stock replenishment.

Eight item types receive independent Poisson order streams at rate
``s * lambda_i`` per day.  An order sells one unit at margin ``m_i`` if stock is
available and is lost otherwise; every sale triggers a one-unit replenishment
arriving ``LEAD_TIME`` days later.  End-of-day stock costs ``h`` per unit.
"""

from __future__ import annotations

from functools import lru_cache

import numba
import numpy as np

from .base import ConditionalProblem, Density, OracleTable

RATES = np.array([3.0, 4.0, 5.0, 6.0, 6.0, 5.0, 4.0, 3.0])
MARGINS = np.array([1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0])
HOLDING = 0.05
LEAD_TIME = 2.0
DAYS = 30
MAX_TARGET = 20
_N_ARRIVALS = 450  # unit-rate arrivals per item; the top rate averages 270 a month


@numba.njit(cache=True)
def _simulate_item(arrivals, rate, target, margin, h, lead, days):
    """Profit, holding cost and order count for one item.

    ``arrivals`` are cumulative unit-rate arrival times; dividing by ``rate``
    gives the order times of this item.
    """
    stock = target
    pipeline = np.empty(arrivals.size + 1)  # replenishment due times, FIFO
    head = 0
    tail = 0
    profit = 0.0
    holding = 0.0
    orders = 0
    k = 0
    for day in range(1, days + 1):
        while True:
            t = arrivals[k] / rate if (rate > 0 and k < arrivals.size) else np.inf
            # deliver anything due before the next order or the end of the day
            nxt = min(t, float(day))
            while head < tail and pipeline[head] <= nxt:
                stock += 1
                head += 1
            if t > day:
                break
            orders += 1
            k += 1
            if stock >= 1:
                stock -= 1
                profit += margin
                pipeline[tail] = t + lead
                tail += 1
        holding += h * stock
    return profit, holding, orders


@numba.njit(cache=True)
def _simulate(arrivals, scale, targets, rates, margins, h, lead, days):
    total = 0.0
    orders = 0
    for i in range(targets.size):
        p, c, o = _simulate_item(arrivals[i], scale * rates[i], targets[i], margins[i], h, lead, days)
        total += p - c
        orders += o
    return total, orders


@lru_cache(maxsize=2048)
def _arrivals(seed):
    rng = np.random.default_rng(seed)
    out = np.cumsum(rng.exponential(size=(RATES.size, _N_ARRIVALS)), axis=1)
    out.flags.writeable = False
    return out


def _targets(x):
    return np.rint(np.clip(np.asarray(x, dtype=float).reshape(-1), 0, MAX_TARGET)).astype(np.int64)


def ato_trace(s, x, seed: int, h: float = HOLDING):
    """(reward, number of orders generated) for one simulated month."""
    return _simulate(_arrivals(seed), float(np.asarray(s).reshape(-1)[0]), _targets(x), RATES, MARGINS,
                     h, LEAD_TIME, DAYS)


def ato_simulate(s, x, seed: int, h: float = HOLDING) -> float:
    """Sales profit minus holding cost over 30 days."""
    return float(ato_trace(s, x, seed, h)[0])


def ato_batch(s, x, seeds, h: float = HOLDING) -> np.ndarray:
    return np.array([ato_simulate(s, x, int(k), h) for k in np.atleast_1d(seeds)])


@numba.njit(cache=True)
def _item_table(arr_all, scale, rate, margin, h, lead, days, max_target):
    reps = arr_all.shape[0]
    out = np.zeros(max_target + 1)
    for x in range(max_target + 1):
        acc = 0.0
        for r in range(reps):
            p, c, _ = _simulate_item(arr_all[r], scale * rate, x, margin, h, lead, days)
            acc += p - c
        out[x] = acc / reps
    return out


def ato_oracle(states, reps: int = 1000, seed0: int = 0) -> OracleTable:
    """Exact best integer targets per state on the ``reps``-month average.

    The items do not interact, so each target is chosen by scanning 0..20 on
    its own item's common-random-number average.
    """
    S = np.atleast_2d(states)
    arr = np.stack([_arrivals(seed0 + r) for r in range(reps)])  # (reps, items, n)
    acts, vals = [], []
    for s in S:
        best = np.empty(RATES.size)
        value = 0.0
        for i in range(RATES.size):
            table = _item_table(np.ascontiguousarray(arr[:, i]), float(s[0]), RATES[i], MARGINS[i], HOLDING,
                                LEAD_TIME, DAYS, MAX_TARGET)
            best[i] = float(np.argmax(table))
            value += table.max()
        acts.append(best)
        vals.append(value)
    return OracleTable(S, np.array(acts), np.array(vals), MAX_TARGET + 1, reps)


def make_ato() -> ConditionalProblem:
    return ConditionalProblem(
        name="ato",
        action_lower=np.zeros(RATES.size),
        action_upper=np.full(RATES.size, float(MAX_TARGET)),
        density=Density("uniform", [0.5], [1.5]),
        reward=lambda s, x, seed: ato_simulate(s, x, seed),
        batch_reward=lambda s, x, seeds: ato_batch(s, x, seeds),
        noise="simulation",
    )
