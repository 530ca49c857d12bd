"""Conditional benchmark problems."""

from .ambulance import ambulance_oracle, ambulance_simulate, make_ambulance
from .ato import ato_oracle, ato_simulate, make_ato
from .base import ConditionalProblem, Density, OracleTable, sample_state, state_density
from .synthetic import make_synthetic, synthetic_oracle, synthetic_reward

PROBLEMS = ("branin", "rosenbrock", "ambulance", "ato")


def make_problem(name: str, **params) -> ConditionalProblem:
    """Build a problem by id; synthetic ones accept width, density, noise_sd, n_states."""
    if name in ("branin", "rosenbrock"):
        return make_synthetic(name, **params)
    if params:
        raise ValueError(f"problem {name!r} takes no parameters, got {sorted(params)}")
    if name == "ambulance":
        return make_ambulance()
    if name == "ato":
        return make_ato()
    raise ValueError(f"unknown problem {name!r}; expected one of {PROBLEMS}")


def build_oracle(problem: ConditionalProblem, states, reps: int = 1000, grid: int = 2001) -> OracleTable:
    """Per-state optimum for the opportunity-cost grid."""
    if problem.name in ("branin", "rosenbrock"):
        return synthetic_oracle(problem.name, problem.params["width"], states[:, 0], grid)
    if problem.name == "ambulance":
        return ambulance_oracle(states, reps)
    if problem.name == "ato":
        return ato_oracle(states, reps)
    raise ValueError(f"no oracle for problem {problem.name!r}")


__all__ = [
    "ConditionalProblem", "Density", "OracleTable", "PROBLEMS", "ambulance_oracle", "ambulance_simulate",
    "ato_oracle", "ato_simulate", "build_oracle", "make_ambulance", "make_ato", "make_problem",
    "make_synthetic", "sample_state", "state_density", "synthetic_oracle", "synthetic_reward",
]
