"""
Configuration settings for the low-light detector.

Process-level settings come from the environment (and ``.env``); experiment
settings come from a flat ``section.key = value`` text file plus overrides.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.exceptions import ConfigError
from src.schemas.config_schemas import ExperimentConfig


class Settings(BaseSettings):
    """Application settings."""

    # Data and runs
    T2_DATA_DIR: str = "./data/synthlight"
    T2_RUNS_DIR: str = "./runs"
    T2_CHECKPOINT: Optional[str] = None

    # API Configuration
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000

    # Compute
    DEVICE: str = "cpu"

    # Logging
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


settings = Settings()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install a single stream handler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel((level or settings.LOG_LEVEL).upper())


def parse_config_value(raw: str) -> Any:
    """Parse a value as JSON when possible, otherwise keep the raw string."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse the flat config format into ``{"section.key": value}``."""
    entries: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: key '{key}' must have the form section.key")
        entries[key] = parse_config_value(value)
    return entries


def parse_override_args(args: Iterable[str]) -> Dict[str, Any]:
    """Turn ``--section.key=value`` / ``--section.key value`` flags into overrides."""
    overrides: Dict[str, Any] = {}
    tokens: List[str] = list(args)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument '{token}'")
        body = token[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override '{token}' is missing a value")
            key, value = body, tokens[i + 1]
            i += 2
        if key.count(".") != 1:
            raise ConfigError(f"override '{key}' must have the form section.key")
        overrides[key] = parse_config_value(value)
    return overrides


def build_config(entries: Dict[str, Any]) -> ExperimentConfig:
    """Validate flat entries into an ``ExperimentConfig``."""
    try:
        return ExperimentConfig().with_overrides(entries)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_experiment_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Load a config file (optional) and apply overrides on top of it."""
    entries: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        try:
            text = config_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        entries.update(parse_config_text(text, source=str(config_path)))
    entries.update(overrides or {})
    return build_config(entries)


def resolve_data_root(config: ExperimentConfig) -> Path:
    """Dataset root from the config, falling back to ``T2_DATA_DIR``."""
    return Path(config.data.root or settings.T2_DATA_DIR)


def split_known_overrides(argv: List[str]) -> Tuple[List[str], List[str]]:
    """Separate ``--section.key`` overrides from ordinary CLI arguments."""
    known: List[str] = []
    extra: List[str] = []
    i = 0
    while i < len(argv):
        token = argv[i]
        name = token[2:].split("=", 1)[0] if token.startswith("--") else ""
        if "." in name:
            extra.append(token)
            if "=" not in token and i + 1 < len(argv):
                extra.append(argv[i + 1])
                i += 1
        else:
            known.append(token)
        i += 1
    return known, extra
