"""Experiment configuration: a flat ``key = value`` file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

ALGORITHMS = ("conbo3", "conbo5", "revi", "uni", "ei_joint", "knn", "pg", "kg_h_global")
PROBLEMS = ("branin", "rosenbrock", "ambulance", "ato")
_DIMS = {"branin": (1, 1), "rosenbrock": (1, 1), "ambulance": (2, 6), "ato": (1, 8)}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    algorithm: str
    budget: int
    n_init: Optional[int] = None
    replications: int = 1
    seed: int = 0
    batch_size: int = 1
    do_trick: bool = False
    eval_cadence: int = 5
    oracle: str = ""
    output_dir: str = "runs"
    name: str = ""
    # problem parameters (synthetic problems only)
    width: float = 1.0
    density: str = "uniform"
    noise_sd: float = 0.1
    n_states: int = 0
    # model and optimizer budgets
    kernel: str = "matern"
    refit_every: int = 5
    n_s: int = 20
    outer_starts: int = 10
    outer_steps: int = 30
    inner_random: int = 40
    inner_steps: int = 20
    oc_levels: int = 11
    oc_reps: int = 200
    record_timing: bool = False

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; expected one of {', '.join(PROBLEMS)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
        d = sum(_DIMS[self.problem])
        if self.n_init is None:
            object.__setattr__(self, "n_init", 4 * d)
        if self.n_init < 2 * d:
            raise ConfigError(f"n_init must be at least 2*(d_s+d_x) = {2 * d}")
        if not self.budget > self.n_init:
            raise ConfigError(f"budget {self.budget} must exceed n_init {self.n_init}")
        for key in ("replications", "batch_size", "eval_cadence", "refit_every", "n_s", "outer_starts",
                    "inner_random", "oc_levels", "oc_reps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.outer_steps < 0 or self.inner_steps < 0:
            raise ConfigError("optimizer step counts must be >= 0")
        synthetic = self.problem in ("branin", "rosenbrock")
        if self.do_trick and not (synthetic and self.n_states > 0):
            raise ConfigError("do_trick requires a finite state space (n_states > 0)")
        if self.kernel not in ("matern", "trend_offset"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "trend_offset" and not (synthetic and self.n_states > 0):
            raise ConfigError("the trend_offset kernel needs a finite state space")
        if not 0.0 <= self.width <= 1.0:
            raise ConfigError("width must lie in [0, 1]")
        if self.do_trick and self.budget - self.n_init < self.n_states:
            raise ConfigError("budget leaves no room for the per-state reserve")

    @property
    def label(self) -> str:
        """Problem label used in run files; includes the synthetic parameters."""
        if self.problem in ("branin", "rosenbrock"):
            tag = f"{self.problem}-w{self.width:g}-{self.density}"
            return tag + (f"-k{self.n_states}" if self.n_states else "")
        return self.problem

    @property
    def run_name(self) -> str:
        return self.name or f"{self.label}_{self.algorithm}_b{self.batch_size}_s{self.seed}"

    def problem_params(self) -> dict:
        if self.problem in ("branin", "rosenbrock"):
            return {"width": self.width, "density": self.density, "noise_sd": self.noise_sd,
                    "n_states": self.n_states or None}
        return {}


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key, raw):
    kind = _FIELDS[key].type
    try:
        if kind in ("int", "Optional[int]"):
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    for req in ("problem", "algorithm", "budget"):
        if req not in values:
            raise ConfigError(f"{source}: missing required key {req!r}")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
