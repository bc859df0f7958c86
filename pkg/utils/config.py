"""
Configuration utilities for pedalign.
Handles run settings, config-file lookup and command-line overrides.
"""

import copy
import json
import os

from backend.errors import ConfigError
from utils.io_json import atomic_write_text
from utils.logger import get_logger

logger = get_logger(__name__)

# Config file location
CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data')
CONFIG_FILE = os.path.join(CONFIG_DIR, 'app_config.json')
CONFIG_ENV_VAR = 'PEDALIGN_CONFIG'

# Default configuration
DEFAULT_CONFIG = {
    "paths": {
        "corpus": None,
        "sft_stream": None,
        "solution_bank": None,
        "out_dir": "runs/latest",
    },
    "split": {
        "seed": 13,
        "n_sft": 600,
        "n_lhp": 600,
        "n_test": 450,
    },
    "policy": {
        "n_buckets": 64,
        "hash_seed": 0,
        "min_freq": 1,
    },
    "sft": {
        "learning_rate": 1e-2,
        "batch_size": 16,
        "epochs": 3,
        "weight_decay": 0.05,
        "warmup_ratio": 0.1,
        "seed": 13,
    },
    "lhp": {
        "learning_rate": 1e-3,
        "batch_size": 16,
        "epochs": 3,
        "weight_decay": 0.05,
        "warmup_ratio": 0.1,
        "seed": 13,
        "beta": 0.1,
        "algo": "dpo",
        "lambda_d": 1.0,
        "lambda_u": 1.0,
        "init_from_sft": True,
    },
    "prefgen": {
        "rejected_source": "noisy",
        "flip_prob": 0.3,
        "seed": 13,
        "misaligned_template": "The answer to this part is: {{ answer }}. Let's move on.",
    },
    "metrics": {
        "round_cap": 8,
    },
    "sweep": {
        "betas": [0.1, 0.3, 0.6, 0.9],
        "algos": ["dpo", "ipo", "kto"],
    },
    "logging": {
        "log_dir": None,
    },
}

# Flag name -> (section, key)
OVERRIDE_KEYS = {
    "seed": [("split", "seed"), ("sft", "seed"), ("lhp", "seed"), ("prefgen", "seed")],
    "algo": [("lhp", "algo")],
    "beta": [("lhp", "beta")],
    "out": [("paths", "out_dir")],
    "corpus": [("paths", "corpus")],
    "sft_stream": [("paths", "sft_stream")],
    "solution_bank": [("paths", "solution_bank")],
    "betas": [("sweep", "betas")],
    "algos": [("sweep", "algos")],
    "rejected_source": [("prefgen", "rejected_source")],
}


def resolve_config_path(path=None):
    """
    Pick the config file: explicit path, then $PEDALIGN_CONFIG, then the bundled default.

    Returns:
        Tuple of (path, explicit) where explicit tells whether the path was requested
    """
    if path:
        return path, True
    env_path = os.environ.get(CONFIG_ENV_VAR)
    if env_path:
        return env_path, True
    return CONFIG_FILE, False


def merge_config(base, update):
    """Merge `update` into a copy of `base`, one level of sections deep."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def load_config(path=None):
    """
    Load the run configuration, merged over DEFAULT_CONFIG.

    Relative paths inside the "paths" section are resolved against the
    directory holding the config file.
    """
    config_path, explicit = resolve_config_path(path)

    if not os.path.exists(config_path):
        if explicit:
            raise ConfigError(f"Config file not found: {config_path}")
        logger.debug("No config file, using defaults")
        return copy.deepcopy(DEFAULT_CONFIG)

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in config {config_path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"Cannot read config {config_path}: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"Config {config_path} must contain a JSON object")

    config = merge_config(DEFAULT_CONFIG, data)
    base_dir = os.path.dirname(os.path.abspath(config_path))
    for key, value in config["paths"].items():
        if value and not os.path.isabs(value):
            config["paths"][key] = os.path.normpath(os.path.join(base_dir, value))

    logger.debug(f"Loaded config from {config_path}")
    return config


def save_config(config, path=None):
    """Save the configuration as JSON."""
    config_path, _ = resolve_config_path(path)
    atomic_write_text(config_path, json.dumps(config, indent=2, sort_keys=True) + "\n")
    return config_path


def apply_overrides(config, **flags):
    """
    Apply command-line flags on top of the loaded config. Flags win; None is ignored.

    Returns:
        New config dict
    """
    config = copy.deepcopy(config)
    for flag, value in flags.items():
        if value is None:
            continue
        if flag not in OVERRIDE_KEYS:
            raise ConfigError(f"Unknown override: {flag}")
        for section, key in OVERRIDE_KEYS[flag]:
            config[section][key] = value
    return config


def require_section(config, section):
    """Return one config section, failing with ConfigError when absent."""
    value = config.get(section)
    if not isinstance(value, dict):
        raise ConfigError(f"Config section missing: {section}")
    return value
