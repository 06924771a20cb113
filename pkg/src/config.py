import json
import logging
import os
from typing import Any, Dict, List, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

from src import __version__
from src.errors import ConfigError, DatasetIOError

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = os.path.join("data", "processed")
MANIFEST_NAME = "run_manifest.json"

# Load environment variables
load_dotenv()


def default_threads() -> int:
    raw = os.getenv("AMODAL_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"AMODAL_THREADS must be an integer, got {raw!r}") from e
    if value < 1:
        raise ConfigError(f"AMODAL_THREADS must be >= 1, got {value}")
    return value


def default_output_dir() -> str:
    return os.getenv("AMODAL_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Reads a JSON config file whose keys are long flag names.

    Raises:
        DatasetIOError: If the file does not exist.
        ConfigError: If it is not a JSON object.
    """
    if not path:
        return {}
    if not os.path.exists(path):
        raise DatasetIOError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return {normalize_key(k): v for k, v in data.items()}


def resolve_options(defaults: Mapping[str, Any], file_values: Mapping[str, Any], explicit: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Merges option sources: explicit flags win over the config file, which wins
    over defaults. An explicit value of None means 'flag not given'.
    """
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    resolved = dict(defaults)
    resolved.update(file_values)
    resolved.update({k: v for k, v in explicit.items() if v is not None and k in defaults})
    return resolved


class RunConfig(BaseModel):
    """
    Resolved configuration of one CLI run, written next to its outputs.
    """
    command: str
    inputs: List[str] = Field(default_factory=list, description="Positional input paths.")
    options: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    tool_version: str = __version__

    def to_json(self) -> str:
        # no timestamps: the manifest must be byte-reproducible
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def write_manifest(run: RunConfig, output_dir: str) -> str:
    """
    Writes run_manifest.json into output_dir and returns its path.
    """
    path = os.path.join(output_dir, MANIFEST_NAME)
    try:
        os.makedirs(output_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(run.to_json())
    except OSError as e:
        raise DatasetIOError(f"Could not write manifest to {path}: {e}") from e
    logger.debug("Run manifest written to %s", path)
    return path


def load_manifest(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise DatasetIOError(f"Manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return RunConfig.model_validate_json(f.read())
        except ValueError as e:
            raise ConfigError(f"{path}: invalid run manifest ({e})") from e
