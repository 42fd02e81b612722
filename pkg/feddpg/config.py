"""
Configuration handling for feddpg
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import dacite
import yaml

from feddpg.errors import ConfigError

INPUT_MODES = ("prompt_and_text", "text_only", "prompt_only", "static_prompt")
BACKBONE_MODES = ("pretrained", "random")
PARTITION_SCHEMES = ("iid", "label_skew")

# Keys that only affect where/how a run executes, never what it computes
_DIGEST_EXCLUDED = {
    ("experiment", "output_dir"),
    ("experiment", "log_dir"),
    ("experiment", "log_level"),
    ("experiment", "show_progress"),
    ("federation", "parallel_clients"),
}


@dataclass
class EncoderConfig:
    """Frozen transformer classifier standing in for the pre-trained language model"""

    d_e: int = 32
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 128
    max_len: int = 64
    num_classes: int = 2

    # "pretrained": train on a pretext task then freeze; "random": freeze at init
    backbone: str = "pretrained"
    pretrain_steps: int = 300
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 16
    pretrain_samples: int = 2000

    def __post_init__(self):
        for name in ("d_e", "num_layers", "num_heads", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.d_e % self.num_heads != 0:
            raise ConfigError(
                f"encoder.d_e ({self.d_e}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.num_classes < 2:
            raise ConfigError("encoder.num_classes must be at least 2")
        if self.backbone not in BACKBONE_MODES:
            raise ConfigError(f"encoder.backbone must be one of {BACKBONE_MODES}")
        if self.pretrain_steps < 0:
            raise ConfigError("encoder.pretrain_steps must be non-negative")


@dataclass
class GeneratorConfig:
    """Two-layer MLP prompt generator (or static prompt matrix)"""

    hidden: int = 10
    prompt_len: int = 5
    activation: str = "tanh"
    input_mode: str = "prompt_and_text"
    # Filled from encoder.d_e when omitted
    d_e: Optional[int] = None

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"generator.input_mode must be one of {INPUT_MODES}")
        if self.hidden < 1:
            raise ConfigError("generator.hidden must be at least 1")
        if self.prompt_len < 1 and self.input_mode != "text_only":
            raise ConfigError("generator.prompt_len must be at least 1")
        if self.prompt_len < 0:
            raise ConfigError("generator.prompt_len must be non-negative")
        if self.activation not in ("tanh", "gelu", "relu"):
            raise ConfigError(f"unknown generator.activation {self.activation!r}")

    @property
    def d_out(self) -> int:
        return (self.d_e or 0) * self.prompt_len


@dataclass
class RoundConfig:
    """Federated round settings"""

    num_clients: int = 100
    selection_ratio: float = 0.10
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 8

    partition: str = "iid"
    dirichlet_alpha: float = 1.0

    checkpoint_interval: int = 10
    # Worker processes for local training; <= 1 trains inline
    parallel_clients: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("federation.num_clients must be positive")
        if not 0.0 < self.selection_ratio <= 1.0:
            raise ConfigError("federation.selection_ratio must be in (0, 1]")
        if round(self.selection_ratio * self.num_clients) < 1:
            raise ConfigError(
                f"selection_ratio {self.selection_ratio} selects no client out of "
                f"{self.num_clients}"
            )
        if self.local_epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("federation.local_epochs/lr must be >= 0 and batch_size >= 1")
        if self.partition not in PARTITION_SCHEMES:
            raise ConfigError(f"federation.partition must be one of {PARTITION_SCHEMES}")
        if self.dirichlet_alpha <= 0:
            raise ConfigError("federation.dirichlet_alpha must be positive")

    @property
    def clients_per_round(self) -> int:
        return max(1, int(round(self.selection_ratio * self.num_clients)))


@dataclass
class UnlearnConfig:
    """Client-local unlearning by random relabeling"""

    # None picks a client with data using the experiment seed
    client_id: Optional[int] = None
    forget_fraction: float = 0.2
    reg_lambda: float = 1.0
    unlearn_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 8
    # None uses the forget-set size
    retain_sample_count: Optional[int] = None

    # Federated training preceding the unlearning request
    pre_rounds: int = 10
    pre_selection_ratio: float = 0.10
    pre_prompt_len: int = 10
    report_clients: int = 5

    def __post_init__(self):
        if not 0.0 < self.forget_fraction <= 1.0:
            raise ConfigError("unlearning.forget_fraction must be in (0, 1]")
        if self.reg_lambda < 0:
            raise ConfigError("unlearning.reg_lambda must be non-negative")
        if self.unlearn_epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("unlearning.unlearn_epochs/lr must be >= 0 and batch_size >= 1")
        if self.retain_sample_count is not None and self.retain_sample_count < 0:
            raise ConfigError("unlearning.retain_sample_count must be non-negative")


@dataclass
class DataConfig:
    """Synthetic task (or JSON-lines files) used for an experiment"""

    signal_tokens_per_class: int = 8
    signal_rate: float = 0.3
    seq_len_min: int = 20
    seq_len_max: int = 20
    num_train: int = 5000
    num_test: int = 2000
    pad_id: int = 0

    # Optional JSON-lines files replacing the synthetic train/test sets
    train_path: Optional[str] = None
    test_path: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.signal_rate <= 1.0:
            raise ConfigError("data.signal_rate must be in [0, 1]")
        if self.signal_tokens_per_class < 1:
            raise ConfigError("data.signal_tokens_per_class must be positive")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigError("data.seq_len_min/seq_len_max must satisfy 1 <= min <= max")
        if self.num_train < 0 or self.num_test < 0:
            raise ConfigError("data.num_train/num_test must be non-negative")


@dataclass
class ExperimentSection:
    """Run-level settings"""

    rounds: int = 100
    seed: int = 0
    # Seeds averaged by the capacity study
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])

    grid_ratios: List[float] = field(default_factory=lambda: [0.05, 0.10, 0.20])
    grid_prompt_lens: List[int] = field(default_factory=lambda: [1, 5, 10])
    grid_hidden: List[int] = field(default_factory=lambda: [5, 10, 20])

    eval_batch_size: int = 256
    output_dir: str = "feddpg_output"
    log_level: str = "INFO"
    log_dir: Optional[str] = None
    show_progress: bool = True

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("experiment.rounds must be non-negative")
        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"unknown experiment.log_level {self.log_level!r}")
        if self.eval_batch_size < 1:
            raise ConfigError("experiment.eval_batch_size must be positive")


@dataclass
class Config:
    """Master configuration for feddpg"""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    federation: RoundConfig = field(default_factory=RoundConfig)
    unlearning: UnlearnConfig = field(default_factory=UnlearnConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        if self.generator.d_e is None:
            self.generator.d_e = self.encoder.d_e
        elif self.generator.d_e != self.encoder.d_e:
            raise ConfigError(
                f"generator.d_e ({self.generator.d_e}) must equal encoder.d_e ({self.encoder.d_e})"
            )
        if self.data.pad_id >= self.encoder.vocab_size:
            raise ConfigError("data.pad_id must be inside the vocabulary")
        prompt_len = 0 if self.generator.input_mode == "text_only" else self.generator.prompt_len
        longest = max([prompt_len, self.unlearning.pre_prompt_len]) + self.data.seq_len_max
        if longest > self.encoder.max_len:
            raise ConfigError(
                f"encoder.max_len ({self.encoder.max_len}) cannot hold {prompt_len} prompts "
                f"plus {self.data.seq_len_max} tokens"
            )
        needed = 1 + self.encoder.num_classes * self.data.signal_tokens_per_class + 1
        if not self.train_from_files and needed > self.encoder.vocab_size:
            raise ConfigError(
                f"vocab_size {self.encoder.vocab_size} too small for "
                f"{self.encoder.num_classes} x {self.data.signal_tokens_per_class} signal tokens"
            )

    @property
    def train_from_files(self) -> bool:
        return self.data.train_path is not None

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "Config":
        """Load configuration from a YAML file"""
        config_path = Path(path).resolve()
        with open(config_path, "r") as f:
            config_dict = yaml.safe_load(f) or {}
        config = cls.from_dict(config_dict)

        # Resolve data paths relative to config file location
        for attr in ("train_path", "test_path"):
            value = getattr(config.data, attr)
            if value and not Path(value).is_absolute():
                setattr(config.data, attr, str((config_path.parent / value).resolve()))
        return config

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> "Config":
        if not isinstance(config_dict, dict):
            raise ConfigError("configuration root must be a mapping")
        try:
            return dacite.from_dict(
                data_class=cls,
                data=config_dict,
                config=dacite.Config(strict=True, cast=[float]),
            )
        except dacite.UnexpectedDataError as e:
            raise ConfigError(f"unknown configuration keys: {sorted(e.keys)}") from e
        except dacite.DaciteError as e:
            raise ConfigError(f"invalid configuration: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self, path: Union[str, Path]) -> None:
        """Save configuration to a YAML file"""
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)

    def digest(self) -> str:
        """SHA-256 of the settings that determine an experiment's results"""
        data = self.to_dict()
        for section, key in _DIGEST_EXCLUDED:
            data[section].pop(key, None)
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def replace(self, **sections: Dict[str, Any]) -> "Config":
        """Copy with some section fields replaced, re-validated"""
        data = _editable_dict(self)
        for section, values in sections.items():
            if section not in data:
                raise ConfigError(f"unknown configuration section {section!r}")
            data[section].update(values)
        return Config.from_dict(data)


def _editable_dict(config: Config) -> Dict[str, Any]:
    """``to_dict`` with a generator width that follows the encoder again when rebuilt"""
    data = config.to_dict()
    if data["generator"].get("d_e") == data["encoder"]["d_e"]:
        data["generator"]["d_e"] = None
    return data


def apply_overrides(config: Config, overrides: Sequence[str]) -> Config:
    """
    Apply dotted ``section.key=value`` overrides, returning a re-validated copy

    Values are parsed as YAML scalars, so ``federation.lr=0.1`` yields a float
    and ``data.train_path=null`` yields None.
    """
    data = _editable_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2 or parts[0] not in data:
            raise ConfigError(f"override key {dotted!r} is not of the form section.key")
        section, key = parts
        if key not in data[section]:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        data[section][key] = yaml.safe_load(raw)
    return Config.from_dict(data)


def load_config(config_path: Optional[Union[str, Path]] = None) -> Config:
    """Load configuration from a YAML file or use defaults"""
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"configuration file {config_path} not found")
        return Config.from_yaml(config_path)
    return Config()
