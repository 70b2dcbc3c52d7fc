#!/usr/bin/env python3
"""
Configuration for WeakGround
============================

Flat dotted keys (`gen.*`, `noise.*`, `model.*`, `loss.*`, `train.*`,
`eval.*`, `serve.*` and `seed`) layered as

    built-in defaults < config file < command-line flags

and turned into the typed pydantic sections owned by each module.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from pydantic import ValidationError

from src.evaluator import EvalConfig
from src.exceptions import UsageError
from src.model import ModelConfig
from src.objectives import LossWeights
from src.synthworld import GenConfig, NoiseConfig
from src.trainer import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = Path(__file__).with_name("weakground_config.json")

# Model fields taken from the dataset or from the loss settings at build time
MODEL_DERIVED_FIELDS = {"category_count", "appearance_dim", "room_extent", "temperature",
                        "se_temperature", "init_seed", "relation_count"}

SERVE_DEFAULTS = {"serve.checkpoint": None, "serve.data": None, "serve.chunk_size": 64}


def _flatten(prefix: str, values: Dict[str, Any], skip: Iterable[str] = ()) -> Dict[str, Any]:
    skip = set(skip)
    flat = {}
    for name, value in values.items():
        if name in skip:
            continue
        flat[f"{prefix}.{name}"] = [list(v) if isinstance(v, tuple) else v for v in value] \
            if isinstance(value, (list, tuple)) else value
    return flat


def default_values() -> Dict[str, Any]:
    """Built-in defaults as a flat dotted-key mapping"""
    values: Dict[str, Any] = {"seed": 0}
    values.update(_flatten("gen", GenConfig().model_dump(), skip={"noise"}))
    values.update(_flatten("noise", NoiseConfig().model_dump()))
    values.update(_flatten("model", ModelConfig().model_dump(), skip=MODEL_DERIVED_FIELDS))
    values.update(_flatten("loss", LossWeights().model_dump()))
    values.update(_flatten("train", TrainConfig().model_dump(), skip={"weights", "seed"}))
    values.update(_flatten("eval", EvalConfig().model_dump()))
    values.update(SERVE_DEFAULTS)
    return values


def parse_value(raw: str) -> Any:
    """`--set` value: JSON literal when it parses, plain string otherwise"""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


class Config:
    """Layered WeakGround configuration"""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.values = default_values()
        self.config_file = None
        if config_file is not None and str(config_file) != "default":
            self.config_file = Path(config_file)
            self.update(self._load_config(self.config_file), source=str(self.config_file))

    def _load_config(self, path: Path) -> Dict[str, Any]:
        """Read a flat JSON configuration file"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must map dotted keys to values")
        logger.info(f"Configuration loaded from {path}")
        return data

    def update(self, overrides: Dict[str, Any], source: str = "flags") -> None:
        unknown = sorted(k for k in overrides if k not in self.values)
        if unknown:
            raise UsageError(f"unknown configuration key(s) from {source}: {', '.join(unknown)}")
        self.values.update(overrides)

    def apply_assignments(self, assignments: Iterable[str]) -> None:
        """Apply `key=value` pairs from the command line"""
        overrides = {}
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise UsageError(f"expected key=value, got '{item}'")
            overrides[key.strip()] = parse_value(raw.strip())
        self.update(overrides)

    def get(self, key: str) -> Any:
        if key not in self.values:
            raise UsageError(f"unknown configuration key: {key}")
        return self.values[key]

    def section(self, prefix: str) -> Dict[str, Any]:
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.values.items() if k.startswith(head)}

    @property
    def seed(self) -> int:
        seed = self.values["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise UsageError(f"seed must be an integer, got {seed!r}")
        return seed

    def _build(self, factory, **extra):
        try:
            return factory(**extra)
        except ValidationError as e:
            raise UsageError(f"invalid {factory.__name__}: {e}") from e

    def noise_config(self) -> NoiseConfig:
        return self._build(NoiseConfig, **self.section("noise"))

    def gen_config(self) -> GenConfig:
        return self._build(GenConfig, **self.section("gen"), noise=self.noise_config())

    def loss_weights(self) -> LossWeights:
        return self._build(LossWeights, **self.section("loss"))

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, **self.section("train"), seed=self.seed, weights=self.loss_weights())

    def model_config(self) -> ModelConfig:
        return self._build(ModelConfig, **self.section("model"))

    def eval_config(self) -> EvalConfig:
        return self._build(EvalConfig, **self.section("eval"))

    def get_serve_checkpoint(self) -> Optional[str]:
        return os.getenv("WEAKGROUND_CHECKPOINT") or self.values["serve.checkpoint"]

    def get_serve_data(self) -> Optional[str]:
        return os.getenv("WEAKGROUND_DATA") or self.values["serve.data"]

    def validate_config(self) -> bool:
        """
        Check that every section builds from the current values

        Returns:
            True if the configuration is valid, False otherwise
        """
        try:
            self.gen_config()
            self.train_config()
            self.model_config()
            self.eval_config()
        except UsageError as e:
            logger.error(f"Invalid configuration: {e}")
            return False
        return True

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(self.values, indent=2, sort_keys=True) + "\n")
