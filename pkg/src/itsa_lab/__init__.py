"""itsa-lab: shortcut-perturbation training and Fisher-information studies."""

from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .data.domains import MetricsRecord, ScpConfig
from .harness import run_experiment
from .plots import emit_plots

__version__ = "0.1.0"
__all__ = [
    "ExperimentConfig",
    "MetricsRecord",
    "ScpConfig",
    "emit_plots",
    "load_config",
    "parse_config",
    "run_experiment",
    "serialize_config",
]
