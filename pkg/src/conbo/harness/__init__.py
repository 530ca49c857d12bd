"""Experiment orchestration, file formats and the command line."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiment import (
    MissingOracleError,
    OracleContext,
    do_trick_allocation,
    load_oracle,
    opportunity_cost,
    run_experiment,
    run_replication,
)
from .io import RunRecord, read_records, write_records

__all__ = [
    "ConfigError", "ExperimentConfig", "MissingOracleError", "OracleContext", "RunRecord",
    "do_trick_allocation", "load_config", "opportunity_cost", "parse_config", "read_records",
    "run_experiment", "run_replication", "write_records",
]
