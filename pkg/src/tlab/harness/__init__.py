"""Config-driven sweeps, result files and figure panels."""
from .config import ConfigError, ExperimentConfig, load_config, parse_range
from .runner import COLUMNS, mix_seed, run
