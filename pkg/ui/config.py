"""Experiment configuration: embedded defaults, flat key = value files, command-line overrides."""
import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List

import numpy as np

from core.control import FAMILIES
from core.errors import ConfigError

logger = logging.getLogger(__name__)

EXPERIMENTS = ("check-cordes", "cell-solve", "hbar", "convergence-h", "convergence-sigma",
               "effective-solve", "eps-solve", "exp2")
BENCHMARK_R = [-2.0, 1.0, 1.0, -3.0]


@dataclass
class ExperimentConfig:
    experiment: str = "check-cordes"
    family: str = "fo-benchmark"
    s: List[float] = field(default_factory=lambda: [0.0, 0.0])
    p: List[float] = field(default_factory=lambda: [0.0, 0.0])
    R: List[float] = field(default_factory=lambda: list(BENCHMARK_R))
    sigma: float = 0.01
    sigmas: List[float] = field(default_factory=lambda: [2.0 ** k for k in range(2, -7, -1)])
    N: int = 32
    N_list: List[int] = field(default_factory=lambda: [4, 8, 16, 32, 64])
    degree: int = 1
    tol: float = 1e-10
    max_iter: int = 50
    samples: int = 128
    omega_N: int = 8
    omega_N_list: List[int] = field(default_factory=lambda: [2, 4, 8])
    cell_N: int = 4
    exp2_sigma: float = 0.1
    mode: str = "exact"
    eps: float = 0.1
    eps_N: int = 64
    max_evals: int = 5000
    gtol: float = 1e-9
    ftol: float = 1e-13
    workers: int = 1
    seed: int = 0
    output: str = "results"
    excel: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; known: {list(EXPERIMENTS)}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; known: {sorted(FAMILIES)}")
        for name in ("sigmas", "N_list", "omega_N_list"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        if len(self.R) != 4 or len(self.p) != 2 or len(self.s) != 2:
            raise ConfigError("R needs 4 row-major entries, p and s need 2")
        if self.R[1] != self.R[2]:
            raise ConfigError(f"R must be symmetric, got {self.R}")
        positive = ["sigma", "exp2_sigma", "eps", "tol", "gtol", "ftol"]
        if any(not getattr(self, name) > 0 for name in positive) or min(self.sigmas) <= 0:
            raise ConfigError("sigma, eps and tolerances must be positive")
        counts = ["N", "degree", "max_iter", "samples", "omega_N", "cell_N", "eps_N", "max_evals", "workers"]
        if any(getattr(self, name) < 1 for name in counts) or min(self.N_list + self.omega_N_list) < 1:
            raise ConfigError("mesh sizes, counts and budgets must be positive")

    @property
    def R_matrix(self):
        return np.array(self.R, float).reshape(2, 2)

    def resolved(self):
        return asdict(self)


def _parser_for(tp):
    if tp is bool:
        return lambda text: text.strip().lower() in ("1", "true", "yes", "on")
    if typing.get_origin(tp) in (list, List):
        item = _parser_for(typing.get_args(tp)[0])
        return lambda text: [item(part) for part in text.split(",") if part.strip()]
    if tp is int:
        return lambda text: int(float(text))
    return tp


_TYPES = typing.get_type_hints(ExperimentConfig)


def parse_value(key, text):
    if key not in _TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        return _parser_for(_TYPES[key])(text.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {text!r}: {exc}") from exc


def read_config_file(path):
    """Flat `key = value` lines; `#` starts a comment."""
    if not os.path.exists(path):
        raise ConfigError(f"configuration file {path!r} not found")
    values = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            values[key] = parse_value(key, text)
    return values


def parse_overrides(items):
    values = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), text)
    return values


def load_config(path=None, overrides=None, **explicit):
    """Defaults, then the file, then --set overrides, then explicit keyword values."""
    values = {}
    if path:
        values.update(read_config_file(path))
    values.update(parse_overrides(overrides))
    values.update({k: v for k, v in explicit.items() if v is not None})
    config = replace(ExperimentConfig(), **values) if values else ExperimentConfig()
    logger.debug("resolved configuration: %s", config.resolved())
    return config


def config_keys():
    return [f.name for f in fields(ExperimentConfig)]
