import logging
import os
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from app.core.errors import InvalidInputError
from app.models.slam_models import PipelineConfig, ScenarioConfig

# Load environment variables from .env file
dotenv_path = os.path.join(os.path.dirname(os.path.dirname(__file__)), ".env")
load_dotenv(dotenv_path=dotenv_path)

BACKEND_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SLAM_OUTPUT_DIR = os.getenv("SLAM_OUTPUT_DIR", "./output")
SLAM_LOG_LEVEL = os.getenv("SLAM_LOG_LEVEL", "INFO")
SLAM_SCENARIO_DIR = os.getenv("SLAM_SCENARIO_DIR", os.path.join(BACKEND_DIR, "scenarios"))
SLAM_CORS_ORIGINS = [o.strip() for o in os.getenv("SLAM_CORS_ORIGINS", "*").split(",") if o.strip()]

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Root logging level from the argument or SLAM_LOG_LEVEL."""
    name = (level or SLAM_LOG_LEVEL).upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise InvalidInputError(f"unknown log level '{level}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)


def load_yaml(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: expected a mapping at the top level")
    return data


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive merge; None values in `overrides` leave `base` untouched."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_scenario_path(name_or_path: str) -> str:
    """A scenario file path, or the name of a file in SLAM_SCENARIO_DIR."""
    if os.path.exists(name_or_path):
        return name_or_path
    candidate = os.path.join(SLAM_SCENARIO_DIR, name_or_path)
    for path in (candidate, candidate + ".yaml"):
        if os.path.exists(path):
            return path
    raise InvalidInputError(f"scenario '{name_or_path}' not found (looked in {SLAM_SCENARIO_DIR})")


def load_scenario(name_or_path: str, overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    data = load_yaml(resolve_scenario_path(name_or_path))
    data = merge_overrides(data.get("scenario", data), overrides or {})
    try:
        return ScenarioConfig(**data)
    except ValidationError as exc:
        raise InvalidInputError(f"invalid scenario '{name_or_path}': {exc}") from exc


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Pipeline configuration from an optional YAML file plus overrides.

    A scenario file may carry its pipeline settings under a `pipeline` key.
    """
    data: Dict[str, Any] = {}
    if path:
        loaded = load_yaml(path)
        data = loaded.get("pipeline", loaded)
    data = merge_overrides(data, overrides or {})
    data.setdefault("output_dir", SLAM_OUTPUT_DIR)
    try:
        return PipelineConfig(**data)
    except ValidationError as exc:
        raise InvalidInputError(f"invalid pipeline configuration: {exc}") from exc
