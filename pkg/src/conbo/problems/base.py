"""Benchmark abstraction, state densities and oracle tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri

from ..conditional import StateSpace

DENSITY_KINDS = ("uniform", "triangular", "truncated_gaussian")


@dataclass(frozen=True)
class Density:
    """Product density over a state box.

    ``triangular`` rises linearly from 0 at the lower bound to its peak at the
    upper bound on every axis.  ``truncated_gaussian`` uses ``mean`` and ``sd``.
    """

    kind: str
    lower: np.ndarray
    upper: np.ndarray
    mean: Optional[np.ndarray] = None
    sd: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in DENSITY_KINDS:
            raise ValueError(f"unknown density kind {self.kind!r}")
        for name in ("lower", "upper", "mean", "sd"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.atleast_1d(np.asarray(v, dtype=float)))
        if self.kind == "truncated_gaussian" and (self.mean is None or self.sd is None):
            raise ValueError("truncated_gaussian needs mean and sd")

    @property
    def dim(self) -> int:
        return self.lower.size

    def pdf(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        lo, hi = self.lower, self.upper
        inside = np.all((S >= lo) & (S <= hi), axis=1)
        width = hi - lo
        if self.kind == "uniform":
            val = np.full(len(S), 1.0 / np.prod(width))
        elif self.kind == "triangular":
            val = np.prod(2.0 * (S - lo) / width**2, axis=1)
        else:
            u = (S - self.mean) / self.sd
            mass = ndtr((hi - self.mean) / self.sd) - ndtr((lo - self.mean) / self.sd)
            val = np.prod(np.exp(-0.5 * u * u) / (math.sqrt(2 * math.pi) * self.sd * mass), axis=1)
        return np.where(inside, val, 0.0)

    def ppf(self, U) -> np.ndarray:
        """Per-axis inverse CDF of uniforms ``U`` (m, d)."""
        U = np.atleast_2d(U)
        lo, hi = self.lower, self.upper
        if self.kind == "uniform":
            return lo + U * (hi - lo)
        if self.kind == "triangular":
            return lo + np.sqrt(U) * (hi - lo)
        a = ndtr((lo - self.mean) / self.sd)
        b = ndtr((hi - self.mean) / self.sd)
        return np.clip(self.mean + self.sd * ndtri(a + U * (b - a)), lo, hi)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.ppf(rng.uniform(size=(n, self.dim)))

    def quantile_grid(self, levels: int = 11) -> np.ndarray:
        """Tensor grid of ``levels`` equally spaced quantiles per axis."""
        q = (np.arange(levels) + 0.5) / levels
        axes = [self.ppf(np.tile(q[:, None], (1, self.dim)))[:, k] for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass(frozen=True)
class ConditionalProblem:
    """A conditional benchmark.

    ``reward(s, x, seed)`` is the noisy evaluator in problem units.
    ``expected(S, X)`` (rows) is the noise-free mean if it is available in
    closed form; simulators leave it ``None`` and are averaged instead.
    ``states``, when set, restricts the state space to a finite set whose
    probabilities are proportional to the density.
    """

    name: str
    action_lower: np.ndarray
    action_upper: np.ndarray
    density: Density
    reward: Callable[[np.ndarray, np.ndarray, int], float]
    expected: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    batch_reward: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    noise: str = ""
    states: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "action_lower", np.atleast_1d(np.asarray(self.action_lower, dtype=float)))
        object.__setattr__(self, "action_upper", np.atleast_1d(np.asarray(self.action_upper, dtype=float)))
        if self.states is not None:
            object.__setattr__(self, "states", np.asarray(self.states, dtype=float).reshape(-1, self.d_s))

    @property
    def state_lower(self) -> np.ndarray:
        return self.density.lower

    @property
    def state_upper(self) -> np.ndarray:
        return self.density.upper

    @property
    def d_s(self) -> int:
        return self.density.dim

    @property
    def d_x(self) -> int:
        return self.action_lower.size

    @property
    def finite(self) -> bool:
        return self.states is not None

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.state_lower, self.action_lower])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.state_upper, self.action_upper])

    def state_probs(self) -> np.ndarray:
        p = self.density.pdf(self.states)
        if not p.sum() > 0:
            p = np.ones(len(self.states))
        return p / p.sum()

    # unit-cube coordinates
    def to_unit(self, P) -> np.ndarray:
        return (np.asarray(P, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, U) -> np.ndarray:
        return self.lower + np.asarray(U, dtype=float) * (self.upper - self.lower)

    def evaluate_unit(self, u, seed: int) -> float:
        p = self.from_unit(u)
        return float(self.reward(p[: self.d_s], p[self.d_s:], seed))

    def unit_state_space(self) -> StateSpace:
        """The state distribution expressed on the unit cube."""
        ds = self.d_s
        lo, hi = self.state_lower, self.state_upper
        vol = float(np.prod(hi - lo))
        if self.finite:
            return StateSpace(np.zeros(ds), np.ones(ds), states=(self.states - lo) / (hi - lo),
                              probs=self.state_probs())
        dens = self.density
        return StateSpace(
            np.zeros(ds),
            np.ones(ds),
            density=lambda U: dens.pdf(lo + U * (hi - lo)) * vol,
            sampler=lambda rng, n: (dens.sample(rng, n) - lo) / (hi - lo),
        )

    def mean_reward(self, S, X, reps: int = 200, seed0: int = 10**6) -> np.ndarray:
        """Expected reward of rows (S, X): closed form, else a ``reps``-replication average."""
        S = np.atleast_2d(S)
        X = np.atleast_2d(X)
        if self.expected is not None:
            return np.asarray(self.expected(S, X), dtype=float)
        seeds = seed0 + np.arange(reps)
        if self.batch_reward is not None:
            return np.array([np.mean(self.batch_reward(s, x, seeds)) for s, x in zip(S, X)])
        return np.array([np.mean([self.reward(s, x, int(k)) for k in seeds]) for s, x in zip(S, X)])

    def test_states(self, levels: int = 11) -> np.ndarray:
        """States at which opportunity cost is measured."""
        if self.finite:
            return self.states.copy()
        return self.density.quantile_grid(levels)


def state_density(problem: ConditionalProblem, s) -> float | np.ndarray:
    """Normalized state density; zero outside the state box."""
    S = np.asarray(s, dtype=float)
    vals = problem.density.pdf(S.reshape(-1, problem.d_s))
    return float(vals[0]) if S.ndim <= 1 and S.size == problem.d_s else vals


def sample_state(problem: ConditionalProblem, rng: np.random.Generator) -> np.ndarray:
    """One i.i.d. draw from the state distribution."""
    if problem.finite:
        return problem.states[rng.choice(len(problem.states), p=problem.state_probs())].copy()
    return problem.density.sample(rng, 1)[0]


# --------------------------------------------------------------------------
# Oracle tables
# --------------------------------------------------------------------------


@dataclass
class OracleTable:
    states: np.ndarray
    actions: np.ndarray
    values: np.ndarray
    grid_res: int
    reps: int

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.values)

    def header(self) -> list[str]:
        ds, dx = self.states.shape[1], self.actions.shape[1]
        return [f"s_{i}" for i in range(ds)] + [f"xstar_{i}" for i in range(dx)] + ["fstar", "grid_res", "reps"]

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for s, x, f in zip(self.states, self.actions, self.values):
                w.writerow([repr(float(v)) for v in (*s, *x, f)] + [self.grid_res, self.reps])

    @classmethod
    def read(cls, path) -> "OracleTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        ds = sum(h.startswith("s_") for h in head)
        dx = sum(h.startswith("xstar_") for h in head)
        if not body:
            raise ValueError(f"oracle table {path} has no rows")
        arr = np.array([[float(v) for v in r[: ds + dx + 1]] for r in body])
        return cls(arr[:, :ds], arr[:, ds: ds + dx], arr[:, ds + dx], int(body[0][-2]), int(body[0][-1]))

    def matches(self, states, tol: float = 1e-9) -> bool:
        S = np.atleast_2d(states)
        return S.shape == self.states.shape and np.allclose(S, self.states, atol=tol, rtol=0)
