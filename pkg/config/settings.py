# config/settings.py

from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from utils.env_config import load_run_config, resolve_env_vars
from utils.error_handler import ConfigurationError

PROJECT_ROOT = Path(__file__).resolve().parent.parent

PATHS_CONFIG_FILE = PROJECT_ROOT / "config" / "paths.yml"
MODEL_CONFIG_FILE = PROJECT_ROOT / "config" / "model.yml"
DATASETS_CONFIG_FILE = PROJECT_ROOT / "config" / "datasets.yml"


def _load_yaml(path: Path) -> dict:
    if not path.exists():
        return {}
    with path.open("r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


# ---- Paths config ----
_paths_cfg = resolve_env_vars(_load_yaml(PATHS_CONFIG_FILE).get("paths", {}))

RUNS_DIR = PROJECT_ROOT / _paths_cfg.get("runs_dir", "runs")
LOGS_DIR = PROJECT_ROOT / _paths_cfg.get("logs_dir", "logs")

# ---- Model defaults ----
MODEL_DEFAULTS: Dict[str, Any] = resolve_env_vars(_load_yaml(MODEL_CONFIG_FILE).get("model", {}))

# ---- Dataset presets ----
_datasets_cfg = _load_yaml(DATASETS_CONFIG_FILE).get("datasets", {})

DATASET_PRESETS: Dict[str, Dict[str, Any]] = {
    name: resolve_env_vars(val.get("config", {}))
    for name, val in _datasets_cfg.items()
}
DATASET_DESCRIPTIONS = {name: val.get("description", "") for name, val in _datasets_cfg.items()}


def build_config(
    preset: Optional[str] = None,
    config_file: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
):
    """
    Resolve an SdmambaConfig.

    Precedence: overrides (CLI flags) > config_file > preset > model.yml > field defaults.
    """
    from services.sdmamba_model import SdmambaConfig

    known = set(SdmambaConfig.model_fields)
    values: Dict[str, Any] = {k: v for k, v in MODEL_DEFAULTS.items() if k in known}

    if preset is not None:
        if preset not in DATASET_PRESETS:
            raise ConfigurationError(
                f"Unknown preset '{preset}' (available: {', '.join(sorted(DATASET_PRESETS))})"
            )
        values.update(DATASET_PRESETS[preset])
        _log_if_available('log_config_load', f'preset {preset}', 'SUCCESS', DATASET_DESCRIPTIONS.get(preset, ''))

    if config_file is not None:
        file_values = load_run_config(Path(config_file))
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigurationError(f"Unknown key(s) in {Path(config_file).name}: {', '.join(unknown)}")
        values.update(file_values)
        _log_if_available('log_config_load', str(config_file), 'SUCCESS', f'{len(file_values)} keys')

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigurationError(f"Unknown config field '{key}'")
        values[key] = value

    return SdmambaConfig.model_validate(values)


def _log_if_available(func_name, *args, **kwargs):
    try:
        from services.logging_service import get_run_logger
        getattr(get_run_logger(), func_name)(*args, **kwargs)
    except Exception:
        pass


# Initialize logging service
from services.logging_service import initialize_logger
initialize_logger(LOGS_DIR)
