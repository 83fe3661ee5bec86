"""
Environment settings and the flat ``section.key = value`` config format.

Example:
    # desk-scale H-SAE
    model.d = 64
    model.m_top = 256
    model.k = 4
    opt.warmup_steps = 100
    train.epochs = 2
    toggles.ortho = false
    data.n_parents = 32
    eval.top_n = 8
"""

import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Type, Union

from dotenv import load_dotenv
from dotenv.parser import parse_stream
from pydantic import BaseModel, ValidationError

from components.datagen import DictionarySpec
from components.evaluation import EvalSpec
from components.hsae_model import HsaeConfig
from components.optim import OptConfig
from components.trainer import Toggles, TrainConfig
from utils.errors import ConfigError, ShardIOError

logger = logging.getLogger(__name__)

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

SECTIONS: Dict[str, Type[BaseModel]] = {
    "model": HsaeConfig,
    "opt": OptConfig,
    "train": TrainConfig,
    "toggles": Toggles,
    "data": DictionarySpec,
    "eval": EvalSpec,
}
# train.* only covers TrainConfig's scalar fields
_NESTED_TRAIN_FIELDS = {"model", "opt", "toggles"}
_NONE_VALUES = {"", "none", "null"}


def get_log_level() -> str:
    return os.getenv("HSAE_LOG_LEVEL", "INFO").upper()


def get_threads() -> int:
    raw = os.getenv("HSAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"HSAE_THREADS must be an integer, got '{raw}'", key="HSAE_THREADS")


def get_seed_override() -> Optional[int]:
    raw = os.getenv("HSAE_SEED")
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"HSAE_SEED must be an integer, got '{raw}'", key="HSAE_SEED")


def setup_logging(level: str = None) -> None:
    logging.basicConfig(level=level or get_log_level(), format=LOG_FORMAT)


@dataclass
class ParsedConfig:
    train: TrainConfig
    data: DictionarySpec
    eval: EvalSpec

    def with_seed(self, seed: Optional[int]) -> 'ParsedConfig':
        """Funnel one seed into training and data generation."""
        if seed is None:
            return self
        return ParsedConfig(train=self.train.model_copy(update={"seed": seed}),
                            data=self.data.model_copy(update={"seed": seed}),
                            eval=self.eval)


def _allowed_fields(section: str) -> set:
    fields = set(SECTIONS[section].model_fields)
    if section == "train":
        fields -= _NESTED_TRAIN_FIELDS
    return fields


def _collect(text: str, source: str) -> Dict[str, Dict[str, Tuple[Optional[str], int]]]:
    values: Dict[str, Dict[str, Tuple[Optional[str], int]]] = {name: {} for name in SECTIONS}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise ConfigError(f"Cannot parse {source}: {binding.original.string.strip()!r}", line=line)
        if binding.key is None:
            continue  # blank line or comment
        section, _, name = binding.key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"Unknown config key '{binding.key}'", key=binding.key, line=line)
        if name not in _allowed_fields(section):
            raise ConfigError(f"Unknown config key '{binding.key}'", key=binding.key, line=line)
        if name in values[section]:
            raise ConfigError(f"Duplicate config key '{binding.key}'", key=binding.key, line=line)
        value = binding.value
        if value is None or value.strip().lower() in _NONE_VALUES:
            value = None
        values[section][name] = (value, line)
    return values


def _validate(section: str, entries: Dict[str, Tuple[Optional[str], int]], extra: Dict = None):
    data = {name: value for name, (value, _) in entries.items()}
    if extra:
        data.update(extra)
    try:
        return SECTIONS[section].model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        field = str(err["loc"][0]) if err["loc"] else None
        line = entries[field][1] if field in entries else None
        key = f"{section}.{field}" if field else section
        raise ConfigError(f"Invalid value for '{key}': {err['msg']}", key=key, line=line) from e


def parse_config_text(text: str, source: str = "config") -> ParsedConfig:
    values = _collect(text, source)
    model = _validate("model", values["model"])
    opt = _validate("opt", values["opt"])
    toggles = _validate("toggles", values["toggles"])
    train = _validate("train", values["train"], extra={"model": model, "opt": opt, "toggles": toggles})
    data = _validate("data", values["data"])
    eval_spec = _validate("eval", values["eval"])
    return ParsedConfig(train=train, data=data, eval=eval_spec)


def parse_config(path: Union[str, Path, None]) -> ParsedConfig:
    """
    Parse a config file; unset keys keep their defaults. ``None`` yields
    the all-default config.

    Raises:
        ConfigError: unknown key, duplicate key, bad value or unparsable line
        ShardIOError: the file cannot be read
    """
    if path is None:
        return parse_config_text("")
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ShardIOError(f"Failed to read config {path}: {e}") from e
    parsed = parse_config_text(text, source=str(path))
    logger.debug(f"Parsed config {path}")
    return parsed
