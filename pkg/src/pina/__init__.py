"""Two-stage clustered federated learning with differential privacy at desk scale."""

from .config import ExperimentConfig, ConfigError, load_config, parse_config, dump_config
from .numeric import Layout, ParamVector, RngStream
from .privacy import calibrate_z, default_delta, epsilon_for, spent_budget
from .simulation import Simulator, run_experiment, rounds_to_reach

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "ConfigError", "load_config", "parse_config", "dump_config",
    "Layout", "ParamVector", "RngStream",
    "calibrate_z", "default_delta", "epsilon_for", "spent_budget",
    "Simulator", "run_experiment", "rounds_to_reach", "__version__",
]
