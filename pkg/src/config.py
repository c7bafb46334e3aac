"""
Command-line configuration.
Loads a TOML or JSON config file, applies flag overrides and validates the
merged CliConfig before any command touches the filesystem.
"""

import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from .corpus import CorpusError, CorpusSpec
from .gradcore import ContractViolation
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig
from .utils import config_hash, unknown_name_message

logger = logging.getLogger(__name__)


SECTIONS = ("corpus", "model", "train", "weights", "eval")
REPORT_FORMATS = ("csv", "json", "svg")
EVAL_SPLITS = ("train", "val", "test")


class ConfigError(Exception):
    """Raised when a config file or flag combination is invalid."""
    pass


@dataclass
class EvalOptions:
    """Protocol and report options."""
    split: str = "test"
    hold_out: Optional[str] = None
    formats: Tuple[str, ...] = REPORT_FORMATS
    cam_layer: str = "encoder2.common.final"
    cam_images: int = 4
    batch_size: int = 64

    def validate(self) -> "EvalOptions":
        if self.split not in EVAL_SPLITS:
            raise ConfigError(unknown_name_message("split", self.split, EVAL_SPLITS))
        for fmt in self.formats:
            if fmt not in REPORT_FORMATS:
                raise ConfigError(unknown_name_message("report format", fmt, REPORT_FORMATS))
        if self.cam_images < 1 or self.batch_size < 1:
            raise ConfigError("cam_images and batch_size must be >= 1")
        return self

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalOptions":
        values = dict(data)
        if "formats" in values:
            values["formats"] = tuple(values["formats"])
        return cls(**values)


@dataclass
class CliConfig:
    """Merged corpus, training and evaluation settings for one CLI run."""
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def validate(self, check_methods: bool = True) -> "CliConfig":
        """
        Validate every section and the cross-section rules.

        The model image size follows the corpus. With check_methods the
        held-out and training methods are checked against corpus.methods
        (see check_methods); commands reading an existing corpus pass False
        here and call check_methods once the manifest is loaded.

        Raises:
            ConfigError: Any invalid value
        """
        try:
            self.corpus.validate()
            self.train.validate()
            self.eval.validate()
        except (CorpusError, ContractViolation) as e:
            raise ConfigError(str(e)) from e

        if self.train.model.image_size != self.corpus.image_size:
            raise ConfigError(
                f"model image_size {self.train.model.image_size} differs from corpus image_size "
                f"{self.corpus.image_size}"
            )
        if check_methods:
            self.check_methods(self.corpus.methods)
        return self

    def check_methods(self, methods: Sequence[str]) -> "CliConfig":
        """
        Check the held-out and training methods against a corpus's methods.

        The held-out method is removed from the training methods when those
        are not given explicitly.

        Raises:
            ConfigError: Unknown method, overlap, or nothing left to train on
        """
        methods = list(methods)
        hold_out = self.eval.hold_out
        if hold_out is not None and hold_out not in methods:
            raise ConfigError(unknown_name_message("hold-out method", hold_out, methods))
        train_methods = self.train.train_methods
        if train_methods:
            for method in train_methods:
                if method not in methods:
                    raise ConfigError(unknown_name_message("training method", method, methods))
            if hold_out in train_methods:
                raise ConfigError(f"'{hold_out}' cannot be both a training and the held-out method")
        elif hold_out is not None:
            self.train.train_methods = [m for m in methods if m != hold_out]
            if not self.train.train_methods:
                raise ConfigError("Holding out the only corpus method leaves nothing to train on")
        return self

    def to_dict(self) -> Dict:
        data = {
            "corpus": self.corpus.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
        }
        data["eval"]["formats"] = list(self.eval.formats)
        return data

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def load_config(path: Optional[str]) -> Dict[str, Dict[str, Any]]:
    """
    Read a TOML or JSON config file into its sections.

    Args:
        path: .toml or .json file; None yields an empty config

    Raises:
        OSError: File cannot be read
        ConfigError: Unknown extension, parse error or unknown section
    """
    if path is None:
        return {}
    config_path = Path(path)
    suffix = config_path.suffix.lower()
    try:
        if suffix == ".toml":
            with open(config_path, "rb") as f:
                raw = tomllib.load(f)
        elif suffix == ".json":
            raw = json.loads(config_path.read_text(encoding="utf-8"))
        else:
            raise ConfigError(f"Config must be .toml or .json, got '{config_path.name}'")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse {config_path}: {e}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path}: top level must be a table of sections")
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(unknown_name_message("config section", section, SECTIONS))
        if not isinstance(values, dict):
            raise ConfigError(f"{config_path}: section [{section}] must be a table")
    logger.info(f"Loaded config sections {sorted(raw)} from {config_path}")
    return raw


def _check_keys(section: str, values: Dict, known) -> None:
    for key in values:
        if key not in known:
            raise ConfigError(unknown_name_message(f"key in [{section}]", key, known))


def build_config(raw: Dict[str, Dict[str, Any]], overrides: Optional[Dict[str, Any]] = None,
                 check_methods: bool = True) -> CliConfig:
    """
    Merge file sections with flag overrides into a validated CliConfig.

    Args:
        raw: Sections as returned by load_config
        overrides: Dotted keys such as "train.seed" taking precedence over the file;
            None values are ignored
        check_methods: Check the held-out and training methods against corpus.methods;
            pass False when the methods come from a manifest loaded later

    Raises:
        ConfigError: Unknown keys, wrong types or failed validation
    """
    sections = {name: dict(raw.get(name, {})) for name in SECTIONS}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"Bad override '{dotted}'")
        sections[section][key] = value

    _check_keys("corpus", sections["corpus"], [f.name for f in fields(CorpusSpec)])
    _check_keys("model", sections["model"], [f.name for f in fields(ModelConfig)])
    _check_keys("train", sections["train"], [f.name for f in fields(TrainConfig) if f.name not in ("model", "weights")])
    _check_keys("weights", sections["weights"], [f.name for f in fields(LossWeights)])
    _check_keys("eval", sections["eval"], [f.name for f in fields(EvalOptions)])

    # one sigma drives both the Xh filter and the MHFE kernels
    if "sigma" in sections["model"] and "sigma" not in sections["train"]:
        sections["train"]["sigma"] = sections["model"]["sigma"]
    if "sigma" in sections["train"]:
        sections["model"]["sigma"] = sections["train"]["sigma"]
    sections["model"].setdefault("image_size", sections["corpus"].get("image_size", CorpusSpec.image_size))

    try:
        train = TrainConfig.from_dict({**sections["train"], "model": sections["model"], "weights": sections["weights"]})
        config = CliConfig(
            corpus=CorpusSpec.from_dict(sections["corpus"]),
            train=train,
            eval=EvalOptions.from_dict(sections["eval"]),
        )
        return config.validate(check_methods)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid config value: {e}") from e
