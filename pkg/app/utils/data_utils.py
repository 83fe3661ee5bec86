import json
import logging
from pathlib import Path
from typing import Any, Union

from utils.errors import CorruptionError, ShardIOError

logger = logging.getLogger(__name__)


def ensure_dir(path: Union[str, Path]) -> Path:
    """Create a directory (and parents) if it doesn't exist."""
    path = Path(path)
    if not path.exists():
        try:
            path.mkdir(parents=True)
        except OSError as e:
            raise ShardIOError(f"Failed to create directory {path}: {e}") from e
        logger.info(f"Created directory: {path}")
    return path


def save_json(path: Union[str, Path], data: Any) -> None:
    """Write JSON with a stable layout; key order is the caller's."""
    try:
        with open(path, "w") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise ShardIOError(f"Failed to write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def load_json(path: Union[str, Path]) -> Any:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ShardIOError(f"Failed to read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CorruptionError(f"Could not parse {path} as JSON: {e}") from e
