"""
Shared configuration helpers: environment, logging setup and JSON output
"""

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Union

import numpy as np

from .errors import ConfigError

THREADS_ENV = "ANCHORLAB_THREADS"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def thread_count() -> int:
    """Cap on internal parallelism from ANCHORLAB_THREADS (default 1)"""
    raw = os.environ.get(THREADS_ENV, "1").strip() or "1"
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got '{raw}'") from e
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value}")
    return value


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format=LOG_FORMAT,
    )


def _plain(value: Any) -> Any:
    """Convert numpy values and non-finite floats into JSON-safe values"""
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def to_json(value: Any) -> str:
    """Deterministic JSON text: sorted keys, two-space indent, NaN as null"""
    return json.dumps(_plain(value), indent=2, sort_keys=True) + "\n"


def dump_json(value: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(value))
    return path


def load_json(path: Union[str, Path]) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path} at line {e.lineno}: {e.msg}") from e
