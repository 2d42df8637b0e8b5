"""Run configuration for coloc-retrieval."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import jsonschema
import yaml

from .corpus import CorpusStats
from .encoders import INIT_SCHEMES, ConvSpec, EncoderDims, ParseMode
from .errors import ConfigurationError
from .losses import MINING_STRATEGIES
from .trainer import LOSS_KINDS, MAX_SEED, TrainConfig

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    # encoders
    "embed_dim": 32,
    "word_dim": 16,
    "n_max": 12,
    "conv_layers": [[16, 4, 2], [32, 3, 2]],
    "init_scheme": "lecun_uniform",
    # training
    "loss": "npair",
    "batch_size": 8,
    "learning_rate": 0.1,
    "momentum": 0.9,
    "epochs": 30,
    "seed": 0,
    "margin": 0.2,
    "mining": "hardest",
    "checkpoint_every": 0,
    # evaluation
    "parse_mode": "word",
    "k_list": [1, 5, 10],
    "fold_size": 100,
    "n_folds": 5,
    "workers": 4,
    "mask_quantile": 0.9,
    "trials": 1000,
    # corpus
    "images": 500,
    "image_size": 32,
    "objects_min": 1,
    "objects_max": 4,
    "phrases_target": 2.0,
    "duplicate_fraction": 0.15,
    "captions_per_image": 5,
    "size_word_prob": 0.5,
    "split": [0.8, 0.1, 0.1],
}

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}

CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "embed_dim": _POSITIVE_INT,
        "word_dim": _POSITIVE_INT,
        "n_max": {"type": "integer", "minimum": 3},
        "conv_layers": {
            "type": "array",
            "items": {
                "type": "array",
                "items": _POSITIVE_INT,
                "minItems": 3,
                "maxItems": 3,
            },
        },
        "init_scheme": {"enum": list(INIT_SCHEMES)},
        "loss": {"enum": list(LOSS_KINDS)},
        "batch_size": {"type": "integer", "minimum": 2},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0, "maximum": MAX_SEED},
        "margin": {"type": "number", "minimum": 0},
        "mining": {"enum": list(MINING_STRATEGIES)},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "parse_mode": {"enum": [mode.value for mode in ParseMode]},
        "k_list": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
        "fold_size": _POSITIVE_INT,
        "n_folds": _POSITIVE_INT,
        "workers": _POSITIVE_INT,
        "mask_quantile": {
            "type": "number",
            "exclusiveMinimum": 0,
            "exclusiveMaximum": 1,
        },
        "trials": _POSITIVE_INT,
        "images": _POSITIVE_INT,
        "image_size": {"type": "integer", "minimum": 8},
        "objects_min": {"type": "integer", "minimum": 1, "maximum": 4},
        "objects_max": {"type": "integer", "minimum": 1, "maximum": 4},
        "phrases_target": {"type": "number", "minimum": 1},
        "duplicate_fraction": _FRACTION,
        "captions_per_image": {"type": "integer", "minimum": 1, "maximum": 5},
        "size_word_prob": _FRACTION,
        "split": {
            "type": "array",
            "items": _FRACTION,
            "minItems": 3,
            "maxItems": 3,
        },
    },
}


class ConfigManager:
    """Merged view of defaults, an optional YAML file and flag overrides."""

    def __init__(
        self,
        config_path: Optional[Path] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ):
        """Load ``config_path`` (if any) and apply non-None overrides."""
        self.config_path = Path(config_path) if config_path else None
        self.file_config: Dict[str, Any] = {}
        self.config_data: Dict[str, Any] = {}

        self.load_configuration(overrides or {})

    def load_configuration(self, overrides: Mapping[str, Any]) -> None:
        """Read the YAML file, merge and validate."""
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigurationError(
                    f"Configuration file not found: {self.config_path}"
                )
            with open(self.config_path, "r", encoding="utf-8") as f:
                try:
                    loaded = yaml.safe_load(f)
                except yaml.YAMLError as exc:
                    raise ConfigurationError(
                        f"Invalid YAML in {self.config_path}: {exc}"
                    ) from exc
            if loaded is None:
                loaded = {}
            if not isinstance(loaded, dict):
                raise ConfigurationError(
                    f"{self.config_path} must hold a flat mapping of keys"
                )
            self.file_config = loaded

        merged = dict(DEFAULTS)
        merged.update(self.file_config)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        self.validate(merged)
        self.config_data = merged
        logger.debug(f"Configuration resolved: {self.config_data}")

    @staticmethod
    def validate(data: Mapping[str, Any]) -> None:
        """Raise ConfigurationError listing every schema violation."""
        validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
        problems = sorted(
            validator.iter_errors(dict(data)), key=lambda e: list(e.path)
        )
        if problems:
            details = "; ".join(
                f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}"
                for e in problems
            )
            raise ConfigurationError(f"Invalid configuration: {details}")

    def get(self, key: str) -> Any:
        """Resolved value of a known key."""
        if key not in CONFIG_SCHEMA["properties"]:
            raise ConfigurationError(f"Unknown configuration key: {key}")
        return self.config_data[key]

    def get_encoder_dims(
        self, vocab_size: int, image_size: Optional[Tuple[int, int]] = None
    ) -> EncoderDims:
        """Encoder sizes for a corpus with ``vocab_size`` tokens."""
        size = self.config_data["image_size"]
        dims = EncoderDims(
            image_size=image_size or (size, size),
            conv_layers=tuple(
                ConvSpec(*layer) for layer in self.config_data["conv_layers"]
            ),
            embed_dim=self.config_data["embed_dim"],
            word_dim=self.config_data["word_dim"],
            vocab_size=vocab_size,
            n_max=self.config_data["n_max"],
        )
        dims.validate()
        return dims

    def get_train_config(self) -> TrainConfig:
        """Optimisation settings."""
        cfg = TrainConfig(
            loss_kind=self.config_data["loss"],
            batch_size=self.config_data["batch_size"],
            learning_rate=float(self.config_data["learning_rate"]),
            momentum=float(self.config_data["momentum"]),
            epochs=self.config_data["epochs"],
            seed=self.config_data["seed"],
            margin=float(self.config_data["margin"]),
            mining=self.config_data["mining"],
            checkpoint_every=self.config_data["checkpoint_every"],
            init_scheme=self.config_data["init_scheme"],
        )
        cfg.validate()
        return cfg

    def get_corpus_stats(self) -> CorpusStats:
        """Generator knobs."""
        stats = CorpusStats(
            image_size=self.config_data["image_size"],
            objects_min=self.config_data["objects_min"],
            objects_max=self.config_data["objects_max"],
            phrases_target=float(self.config_data["phrases_target"]),
            duplicate_fraction=float(self.config_data["duplicate_fraction"]),
            captions_per_image=self.config_data["captions_per_image"],
            size_word_prob=float(self.config_data["size_word_prob"]),
            n_max=self.config_data["n_max"],
        )
        stats.validate()
        return stats

    def get_parse_mode(self) -> ParseMode:
        """Word or phrase mode."""
        return ParseMode(self.config_data["parse_mode"])

    def get_k_list(self) -> List[int]:
        """Sorted, de-duplicated K values."""
        return sorted(set(int(k) for k in self.config_data["k_list"]))

    def get_split(self) -> Tuple[float, float, float]:
        """Train, validation and test fractions."""
        train, val, test = (float(f) for f in self.config_data["split"])
        return train, val, test
