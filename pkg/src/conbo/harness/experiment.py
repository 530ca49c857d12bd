"""The sequential experiment loop, opportunity cost and final per-state allocation.

All algorithms work on the unit cube over S x X; points are mapped to problem
units only when the evaluator is called and when opportunity cost is scored.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from ..acquisition import InnerOptimizer, expected_improvement_grad, z_quantiles
from ..baselines import knn_policy, pg_action, pg_fit, pg_next, uniform_next
from ..conditional import (
    ConboConfig,
    ConditionalAcquisition,
    OuterBudget,
    PolicyCache,
    construct_batch,
    optimize_acquisition,
    policy_actions,
    revi_discretization,
    revi_values,
)
from ..gp import Dataset, fit_posterior
from ..hyperfit import HyperparameterWarning, fit_hyperparameters
from ..problems import ConditionalProblem, OracleTable, build_oracle, make_problem
from .config import ExperimentConfig
from .io import RunRecord, append_records, start_run_file

GP_POLICY = ("conbo3", "conbo5", "revi", "uni", "ei_joint", "kg_h_global")
BATCHED = ("conbo3", "conbo5", "revi")
PG_REFIT = 10
PG_EPSILON = 0.2


class MissingOracleError(RuntimeError):
    """A simulator problem was run without a precomputed oracle table."""


class EvaluationError(RuntimeError):
    """A policy proposed an action outside the action box."""


def _derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def eval_seed(seed: int, index: int) -> int:
    """Noise seed of the ``index``-th evaluation of a replication."""
    return _derive_seed(seed, 7, index)


# --------------------------------------------------------------------------
# Oracles and opportunity cost
# --------------------------------------------------------------------------


def load_oracle(cfg: ExperimentConfig, problem: ConditionalProblem) -> OracleTable:
    states = problem.test_states(cfg.oc_levels)
    if cfg.oracle:
        path = Path(cfg.oracle)
        if not path.exists():
            raise MissingOracleError(
                f"oracle table {path} not found; create it with the `oracle` subcommand"
            )
        table = OracleTable.read(path)
        if not table.matches(states):
            raise MissingOracleError(f"oracle table {path} does not cover the test states of {cfg.label}")
        return table
    if problem.expected is not None:
        return build_oracle(problem, states)
    raise MissingOracleError(
        f"problem {problem.name!r} needs a precomputed oracle table; create one with "
        f"`python -m conbo oracle --problem {problem.name} --grid {cfg.oc_levels} --out <path>` "
        "and set `oracle = <path>`"
    )


@dataclass
class OracleContext:
    table: OracleTable
    fstar: np.ndarray
    probs: np.ndarray
    reps: int

    @classmethod
    def build(cls, problem: ConditionalProblem, table: OracleTable, reps: int) -> "OracleContext":
        if problem.expected is not None:
            fstar = table.values
        else:
            # same common random numbers as the policies being scored
            fstar = problem.mean_reward(table.states, table.actions, reps)
        return cls(table, np.asarray(fstar, dtype=float), _state_probs(problem, table.states), reps)


def _state_probs(problem, S):
    if problem.finite:
        idx = [int(np.argmin(np.linalg.norm(problem.states - s, axis=1))) for s in S]
        return problem.state_probs()[idx]
    return problem.density.pdf(S)


def opportunity_cost(policy, oracle: OracleTable, problem: ConditionalProblem, reps: int = 200,
                     fstar=None, weights=None) -> float:
    """Density-weighted mean of ``f*(s) - E f(s, policy(s))`` over the oracle states.

    ``policy`` maps an (m, d_s) array of states to (m, d_x) actions in problem
    units.  ``weights`` are optional per-state grid weights (default 1).
    """
    S = oracle.states
    X = np.atleast_2d(np.asarray(policy(S), dtype=float))
    tol = 1e-9 * (problem.action_upper - problem.action_lower)
    if np.any(X < problem.action_lower - tol) or np.any(X > problem.action_upper + tol):
        raise EvaluationError("policy returned an action outside the action bounds")
    X = np.clip(X, problem.action_lower, problem.action_upper)
    f = problem.mean_reward(S, X, reps)
    if fstar is None:
        fstar = oracle.values if problem.expected is not None else problem.mean_reward(S, oracle.actions, reps)
    w = np.ones(len(S)) if weights is None else np.asarray(weights, dtype=float)
    P = _state_probs(problem, S)
    return float(np.sum(w * (fstar - f) * P) / np.sum(w * P))


# --------------------------------------------------------------------------
# One replication
# --------------------------------------------------------------------------


@dataclass
class _Settings:
    conbo: ConboConfig
    outer: OuterBudget
    inner: InnerOptimizer


def _settings(cfg: ExperimentConfig) -> _Settings:
    inner = InnerOptimizer(n_random=cfg.inner_random, n_ascent=cfg.inner_steps)
    outer = OuterBudget(n_starts=cfg.outer_starts, n_uniform=(cfg.outer_starts + 1) // 2,
                        n_steps=cfg.outer_steps)
    zgrid = z_quantiles(3 if cfg.algorithm == "conbo3" else 5)
    return _Settings(ConboConfig(n_s=cfg.n_s, zgrid=zgrid, inner=inner, outer=outer), outer, inner)


def initial_design(problem: ConditionalProblem, n: int, rng) -> np.ndarray:
    """Latin hypercube on the unit cube; finite states are assigned by stratum."""
    d = problem.d_s + problem.d_x
    U = qmc.LatinHypercube(d=d, seed=rng).random(n)
    if problem.finite:
        S = problem.unit_state_space().states
        idx = np.minimum((U[:, 0] * len(S)).astype(int), len(S) - 1)
        U[:, : problem.d_s] = S[idx]
    return U


class _Replication:
    def __init__(self, cfg: ExperimentConfig, problem: ConditionalProblem, oracle: OracleContext, rep: int):
        self.cfg = cfg
        self.problem = problem
        self.oracle = oracle
        self.seed = cfg.seed + rep
        self.d_s = problem.d_s
        self.d = problem.d_s + problem.d_x
        self.bounds = (np.zeros(self.d), np.ones(self.d))
        self.space = problem.unit_state_space()
        self.settings = _settings(cfg)
        self.algo_rng = np.random.default_rng([self.seed, 1])
        self.data = Dataset.empty(problem.d_s, problem.d_x)
        self.spec = None
        self.prev_peaks = None
        self.pg_policy = None
        self.pg_fitted_at = 0
        self.records: list[RunRecord] = []
        self.iteration = 0
        self.wall_ms = 0.0

    # evaluation
    def evaluate(self, U):
        U = np.atleast_2d(U)
        ys = []
        for u in U:
            ys.append(self.problem.evaluate_unit(u, eval_seed(self.seed, len(self.data) + len(ys))))
        self.data = self.data.append(U, ys)

    # model
    def refit(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HyperparameterWarning)
            self.spec = fit_hyperparameters(
                self.data, self.cfg.kernel, input_bounds=self.bounds, seed=_derive_seed(self.seed, 2, self.iteration)
            )

    def posterior(self):
        return fit_posterior(self.data, self.spec)

    # policies in problem units
    def _gp_policy(self, S):
        post = self.posterior()
        U = (S - self.problem.state_lower) / (self.problem.state_upper - self.problem.state_lower)
        cache = PolicyCache(self.d_s)  # cleared before every evaluation
        A, _ = policy_actions(post, U, cache, self.settings.inner, self.bounds,
                              np.random.default_rng([self.seed, 3, self.iteration]))
        return self._actions_to_problem(A)

    def _actions_to_problem(self, A):
        p = self.problem
        return p.action_lower + np.clip(A, 0.0, 1.0) * (p.action_upper - p.action_lower)

    def _unit_states(self, S):
        p = self.problem
        return (S - p.state_lower) / (p.state_upper - p.state_lower)

    def policy(self, S):
        alg = self.cfg.algorithm
        if alg in GP_POLICY:
            return self._gp_policy(S)
        U = self._unit_states(S)
        if alg == "knn":
            return self._actions_to_problem(np.array([knn_policy(self.data, u) for u in U]))
        if alg == "pg":
            pol = pg_fit(self.data, seed=_derive_seed(self.seed, 4, len(self.data)))
            return self._actions_to_problem(np.atleast_2d(pg_action(pol, U)))
        raise ValueError(alg)

    def record(self, policy=None):
        oc = opportunity_cost(policy or self.policy, self.oracle.table, self.problem, self.oracle.reps,
                              fstar=self.oracle.fstar)
        self.records.append(RunRecord(self.cfg.label, self.cfg.algorithm, self.seed, self.iteration,
                                      len(self.data), oc, round(self.wall_ms, 3)))

    # suggestions
    def suggest(self, q: int) -> np.ndarray:
        alg = self.cfg.algorithm
        rng = self.algo_rng
        if alg in ("uni", "knn"):
            return uniform_next(self.bounds, rng)[None]
        if alg == "pg":
            n = len(self.data)
            if n >= 5 and (self.pg_policy is None or n - self.pg_fitted_at >= PG_REFIT):
                self.pg_policy = pg_fit(self.data, seed=_derive_seed(self.seed, 4, n))
                self.pg_fitted_at = n
            s = self.space.sample(rng, 1)[0]
            x = pg_next(self.pg_policy, s, self.problem.d_x, rng, PG_EPSILON)
            return np.concatenate([s, x])[None]

        post = self.posterior()
        st = self.settings
        choices = self.space.states if self.problem.finite else None
        if alg == "ei_joint":
            incumbent = float(np.max(self.data.outputs))
            fn = lambda P, r: expected_improvement_grad(post, P, incumbent)  # noqa: E731
        elif alg in ("conbo3", "conbo5", "kg_h_global"):
            acq = ConditionalAcquisition(post, st.conbo, self.space, self.bounds,
                                         global_mode=alg == "kg_h_global")
            fn = acq.values_and_grads
            if alg == "kg_h_global":
                choices = None
        elif alg == "revi":
            disc = revi_discretization(len(self.data), self.space, self.bounds, rng)
            fn = lambda P, r: revi_values(post, P, disc, grad=True)  # noqa: E731
        else:
            raise ValueError(alg)
        best, hist = optimize_acquisition(fn, self.bounds, st.outer, rng, previous=self.prev_peaks,
                                          state_choices=choices, d_s=self.d_s)
        self.prev_peaks = hist.top(st.outer.n_starts - st.outer.n_uniform)
        if q > 1 and alg in BATCHED:
            return construct_batch(hist, min(q, len(hist)), post.kernel)
        return best[None]

    def do_trick(self):
        """One EI-chosen evaluation per finite state; returns the best-observed policy."""
        start = len(self.data)
        counter = iter(range(start, start + len(self.space.states)))

        def evaluator(u):
            return self.problem.evaluate_unit(u, eval_seed(self.seed, next(counter)))

        self.data = do_trick_allocation(self.posterior(), self.data, self.space.states, evaluator,
                                        self.bounds, self.settings.outer, self.algo_rng)
        return self.best_observed_policy

    def best_observed_policy(self, S):
        U = self._unit_states(S)
        out = []
        for u in U:
            mask = np.all(np.isclose(self.data.inputs[:, : self.d_s], u, atol=1e-12), axis=1)
            rows = np.flatnonzero(mask)
            if rows.size == 0:
                raise EvaluationError("no observation at a test state")
            out.append(self.data.inputs[rows[np.argmax(self.data.outputs[rows])], self.d_s:])
        return self._actions_to_problem(np.array(out))

    def run(self):
        cfg = self.cfg
        design_rng = np.random.default_rng([self.seed, 0])
        self.evaluate(initial_design(self.problem, cfg.n_init, design_rng))
        uses_gp = cfg.algorithm in GP_POLICY
        reserve = len(self.space.states) if cfg.do_trick else 0
        stop = cfg.budget - reserve
        if uses_gp:
            self.refit()
        self.record()
        while len(self.data) < stop:
            if uses_gp and self.iteration % cfg.refit_every == 0 and self.iteration > 0:
                self.refit()
            q = cfg.batch_size if cfg.algorithm in BATCHED else 1
            q = min(q, stop - len(self.data))
            t0 = time.perf_counter()
            pts = self.suggest(q)
            if cfg.record_timing:
                self.wall_ms = 1000.0 * (time.perf_counter() - t0)
            self.evaluate(pts)
            self.iteration += 1
            if self.iteration % cfg.eval_cadence == 0 or len(self.data) >= stop:
                self.record()
        if cfg.do_trick:
            policy = self.do_trick()
            self.iteration += 1
            self.record(policy)
        return self.records


def run_replication(cfg: ExperimentConfig, rep: int, oracle: OracleContext | None = None):
    """Records of one replication and the error that stopped it (or ``None``)."""
    problem = make_problem(cfg.problem, **cfg.problem_params())
    if oracle is None:
        oracle = OracleContext.build(problem, load_oracle(cfg, problem), cfg.oc_reps)
    runner = _Replication(cfg, problem, oracle, rep)
    try:
        runner.run()
        return runner.records, None
    except Exception as exc:  # the partial record set is still written
        fail = RunRecord(cfg.label, cfg.algorithm, runner.seed, runner.iteration, len(runner.data),
                         math.nan, 0.0)
        return runner.records + [fail], f"{type(exc).__name__}: {exc}"


def _worker(args):
    cfg, rep, oracle = args
    return run_replication(cfg, rep, oracle)


class ExperimentFailure(RuntimeError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> list[RunRecord]:
    """Run all replications and write ``<out_dir>/<run_name>.csv``.

    Replications are written in order, each in a single append, whatever the
    number of worker processes.
    """
    if cfg.batch_size > 1 and cfg.algorithm not in BATCHED:
        warnings.warn(f"{cfg.algorithm} is sequential; batch_size {cfg.batch_size} is ignored", stacklevel=2)
    problem = make_problem(cfg.problem, **cfg.problem_params())
    oracle = OracleContext.build(problem, load_oracle(cfg, problem), cfg.oc_reps)
    out = Path(out_dir or cfg.output_dir) / f"{cfg.run_name}.csv"
    start_run_file(out)
    tasks = [(cfg, r, oracle) for r in range(cfg.replications)]
    records: list[RunRecord] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_worker, tasks)
            for recs, err in results:
                append_records(out, recs)
                records += recs
                if err:
                    raise ExperimentFailure(err, records)
    else:
        for task in tasks:
            recs, err = _worker(task)
            append_records(out, recs)
            records += recs
            if err:
                raise ExperimentFailure(err, records)
    return records


def do_trick_allocation(post, data: Dataset, states, evaluator, bounds, budget: OuterBudget, rng):
    """Evaluate the in-state EI argmax once per state and return the augmented data.

    ``evaluator(u)`` returns the reward at a unit-cube point.  A state with no
    observations uses the global best observation as its incumbent.
    """
    ds = data.d_s
    for s in np.atleast_2d(states):
        mask = np.all(data.inputs[:, :ds] == s, axis=1)
        pool = data.outputs[mask] if mask.any() else data.outputs
        incumbent = float(np.max(pool))
        fn = lambda P, r: expected_improvement_grad(post, P, incumbent)  # noqa: E731
        best, _ = optimize_acquisition(fn, bounds, budget, rng, state_choices=s[None], d_s=ds)
        data = data.append(best[None], [evaluator(best)])
    return data
