"""Run configuration: one INI-style document with flat sections.

Unknown sections or keys are errors, not warnings.  The perception-frame
count K is derived from the task and is deliberately not a key.  The
canonical serialization (``to_ini``) feeds the checkpoint config hash.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field

from change3d.encoder import EncoderConfig, FRAME_INIT_MODES, TASK_FRAME_COUNT
from change3d.captioner import CaptionHeadConfig
from change3d.losses import LossConfig

TASKS = ("bcd", "scd", "bda", "cc")


class ConfigError(ValueError):
    """Invalid or unknown configuration content (CLI exit code 1)."""


@dataclass
class OptimizerConfig:
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    eps: float = 1e-8
    decay_norm_and_bias: bool = False


@dataclass
class ScheduleConfig:
    alpha: float = 0.9
    max_iter: int = 3000


@dataclass
class TrainConfig:
    batch_size: int = 8
    image_size: int = 128
    eval_every: int = 500
    augment: bool = True
    log_every: int = 50


@dataclass
class DataConfig:
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""


@dataclass
class DecoderConfig:
    num_semantic_classes: int = 4
    num_damage_classes: int = 4


@dataclass
class RunConfig:
    task: str = "bcd"
    seed: int = 0
    frame_init: str = "random"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    caption: CaptionHeadConfig = field(default_factory=CaptionHeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.frame_init not in FRAME_INIT_MODES:
            raise ConfigError(f"frame_init must be one of {FRAME_INIT_MODES}")
        if self.train.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        if self.train.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")

    @property
    def k(self) -> int:
        """Perception-frame count; derived from the task, never configured."""
        return TASK_FRAME_COUNT[self.task]


def default_config(task: str, **overrides) -> RunConfig:
    """Per-task defaults: 3000 iterations for bcd/cc, 5000 for scd/bda;
    geometric augmentation off for captioning (captions carry spatial words)."""
    cfg = RunConfig(task=task)
    cfg.schedule.max_iter = 3000 if task in ("bcd", "cc") else 5000
    if task == "cc":
        cfg.train.augment = False
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


_SECTIONS = {
    "run": None,  # handled specially (task/seed/frame_init)
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "caption": CaptionHeadConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "data": DataConfig,
}
_RUN_KEYS = ("task", "seed", "frame_init")


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(text: str, template):
    if isinstance(template, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, (tuple, list)):
        return tuple(int(v) for v in text.split(","))
    return text.strip()


def to_ini(cfg: RunConfig) -> str:
    """Canonical text form (stable key order) used for hashing and storage."""
    out = io.StringIO()
    out.write("[run]\n")
    for key in _RUN_KEYS:
        out.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
    for section, cls in _SECTIONS.items():
        if section == "run":
            continue
        sub = getattr(cfg, section)
        out.write(f"\n[{section}]\n")
        for key, value in asdict(sub).items():
            out.write(f"{key} = {_format_value(value)}\n")
    return out.getvalue()


def from_ini(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")

    cfg = RunConfig()
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [run]")
            setattr(cfg, key, _parse_value(raw, getattr(cfg, key)))
    for section, cls in _SECTIONS.items():
        if section == "run" or not parser.has_section(section):
            continue
        sub = getattr(cfg, section)
        defaults = asdict(sub)
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                setattr(sub, key, _parse_value(raw, defaults[key]))
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {e}") from None
        # re-run dataclass validation with the new values
        try:
            sub.__post_init__() if hasattr(sub, "__post_init__") else None
        except ValueError as e:
            raise ConfigError(str(e)) from None
    try:
        cfg.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return from_ini(fh.read())


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(to_ini(cfg).encode("utf-8")).digest()
