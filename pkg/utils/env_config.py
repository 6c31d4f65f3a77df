# utils/env_config.py

import os
import re
from pathlib import Path
from typing import Any, Dict

from utils.error_handler import ConfigurationError

_ENV_PATTERN = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")


def resolve_env_vars(config: Any) -> Any:
    """
    Resolve environment variables in configuration values.
    Supports ${VAR_NAME} syntax for whole values; unknown variables are left as written.
    """
    if isinstance(config, dict):
        return {key: resolve_env_vars(value) for key, value in config.items()}
    elif isinstance(config, list):
        return [resolve_env_vars(item) for item in config]
    elif isinstance(config, str):
        match = _ENV_PATTERN.match(config.strip())
        if match:
            return os.getenv(match.group(1), config)
        return config
    else:
        return config


def load_run_config(config_path: Path) -> Dict[str, str]:
    """
    Load a flat key=value run-config file.

    Blank lines and lines starting with '#' are ignored, as is anything after
    a ' #' on a value line. Values of the form ${VAR} are read from the
    environment and must be set.
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigurationError(f"Config file not found: {config_path}")

    values: Dict[str, str] = {}
    with open(config_path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split(" #", 1)[0].strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigurationError(
                    f"{config_path.name}:{line_no}: expected key=value, got '{line}'",
                    details={"file": str(config_path), "line": line_no},
                )
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ConfigurationError(f"{config_path.name}:{line_no}: empty key")
            if key in values:
                raise ConfigurationError(f"{config_path.name}:{line_no}: duplicate key '{key}'")
            resolved = resolve_env_vars(value)
            if _ENV_PATTERN.match(resolved):
                raise ConfigurationError(
                    f"{config_path.name}:{line_no}: environment variable in '{value}' is not set"
                )
            values[key] = resolved
    return values
