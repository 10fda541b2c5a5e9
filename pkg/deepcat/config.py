"""
Configuration loading.

Values come from three layers, highest priority first: command-line flags,
a JSON config file, and the defaults declared on the pydantic models in
``deepcat.models``. A ``.env`` file at the repository root may point at the
config file and set the log level and data directory.
"""

import json
import os
from typing import Any, Dict, Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from deepcat.errors import ConfigError

# Load .env from the repository root
load_dotenv(os.path.join(os.path.dirname(__file__), '..', '.env'))

DATA_DIR = os.getenv('DEEPCAT_DATA_DIR', 'data')
LOG_LEVEL = os.getenv('DEEPCAT_LOG_LEVEL', 'INFO')
CONFIG_PATH = os.getenv('DEEPCAT_CONFIG')

ConfigModel = TypeVar('ConfigModel', bound=BaseModel)


def load_config_file(path: Optional[str] = None) -> Dict[str, Any]:
    """Read a JSON config file with one object per section ("model", "train", ...)."""
    path = path or CONFIG_PATH
    if not path:
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object of sections")
    return data


def resolve(model_cls: Type[ConfigModel], file_section: Optional[Dict[str, Any]] = None,
            overrides: Optional[Dict[str, Any]] = None) -> ConfigModel:
    """Build ``model_cls`` from defaults, then the file section, then explicit overrides."""
    values: Dict[str, Any] = {}
    values.update(file_section or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        where = '.'.join(str(p) for p in first.get('loc', ()))
        raise ConfigError(f"{model_cls.__name__}.{where}: {first.get('msg')}")
