"""Configuration dataclasses and the sectioned ``key = value`` config file format.

Every value is addressable as ``section.key`` (e.g. ``model.d_q``) for
command-line overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 64
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128)
    convs_per_stage: int = 2
    level1_taps: tuple[int, ...] = (2, 3)  # 1-based stage indices, shallow to deep
    level2_taps: tuple[int, ...] = (3, 4)
    d_q: int = 64
    n_heads: int = 4
    query_channels: int = 16
    query_size: int = 8
    max_components: int = 16
    camp_dim: int = 32
    camp_scale: float = 1.0  # multiplier on the query/prior dot product
    camp_lambda: float = 0.5

    def validate(self) -> None:
        if self.d_q % self.n_heads:
            raise ConfigError(f"d_q={self.d_q} not divisible by n_heads={self.n_heads}")
        n = len(self.backbone_widths)
        for taps in (self.level1_taps, self.level2_taps):
            if len(taps) < 2:
                raise ConfigError("each level needs at least two backbone taps to fuse")
            if any(not 1 <= t <= n for t in taps) or list(taps) != sorted(taps):
                raise ConfigError(f"taps {taps} must be increasing stage indices in [1, {n}]")
        if self.input_size % (2**n):
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2**{n}")
        if min(self.query_channels, self.query_size, self.max_components, self.camp_dim) < 1:
            raise ConfigError("query/camp sizes must be positive")


@dataclass
class LossConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    tau: float = 10.0
    w_ce1: float = 1.0
    w_ce2: float = 1.0
    w_cfl1: float = 1.0
    w_cfl2: float = 1.0
    w_bce: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        weights = [self.w_ce1, self.w_ce2, self.w_cfl1, self.w_cfl2, self.w_bce]
        if any(w < 0 for w in weights):
            raise ConfigError("loss weights must be >= 0")


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | manifest
    n_coarse: int = 8
    children: tuple[int, ...] = (3,)  # one entry is broadcast to every coarse class
    images_per_class: int = 100
    noise: float = 0.05
    seed: int = 0
    manifest: str = ""
    test_manifest: str = ""
    taxonomy: str = ""
    image_root: str = ""
    hflip: bool = False

    def child_counts(self) -> list[int]:
        if len(self.children) == 1:
            return [self.children[0]] * self.n_coarse
        if len(self.children) != self.n_coarse:
            raise ConfigError("data.children must have one entry or n_coarse entries")
        return list(self.children)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    backbone_lr_mult: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    lr_schedule: str = "constant"  # constant | cosine (per-step decay to 0)
    seed: int = 1
    cfl: bool = True
    eigen_init: bool = True
    camp: bool = True
    head: str = "hierarchical"  # hierarchical | flat
    log_wall_clock: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if not 0.0 < self.backbone_lr_mult <= 1.0:
            raise ConfigError(f"backbone_lr_mult must lie in (0, 1], got {self.backbone_lr_mult}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.head not in ("hierarchical", "flat"):
            raise ConfigError(f"unknown head {self.head!r}")
        self.model.validate()
        self.loss.validate()

    def effective_loss(self) -> LossConfig:
        """Loss weights after applying the ablation flags."""
        loss = dataclasses.replace(self.loss)
        if not self.cfl:
            loss.w_cfl1 = loss.w_cfl2 = 0.0
        if not self.camp:
            loss.w_bce = 0.0
        return loss


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "data": DataConfig}


def _parse_value(raw: str, typ: Any) -> Any:
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if get_origin(typ) is tuple:
        inner = get_args(typ)[0]
        items = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_parse_value(p, inner) for p in items)
    raise ConfigError(f"unsupported config type {typ}")


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _target(cfg: TrainConfig, section: str):
    if section == "train":
        return cfg
    if section in _SECTIONS:
        return getattr(cfg, section)
    raise ConfigError(f"unknown config section {section!r}")


def set_value(cfg: TrainConfig, dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` override (bare keys address [train])."""
    section, _, key = dotted.rpartition(".")
    obj = _target(cfg, section or "train")
    hints = get_type_hints(type(obj))
    if key not in hints or key in _SECTIONS:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        setattr(obj, key, _parse_value(raw, hints[key]))
    except ValueError as exc:
        raise ConfigError(f"bad value for {dotted}: {exc}") from exc


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    flat: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            flat[f"train.{f.name}"] = _format_value(getattr(cfg, f.name))
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            flat[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    return flat


def from_flat(flat: dict[str, str]) -> TrainConfig:
    cfg = TrainConfig()
    for key, value in flat.items():
        set_value(cfg, key, value)
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    """Render in the sectioned file format; parse_config(dump_config(c)) == c."""
    lines: list[str] = []
    current = None
    for dotted, value in to_flat(cfg).items():
        section, key = dotted.split(".", 1)
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = TrainConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            set_value(cfg, f"{section}.{key}", value)
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(to_flat(cfg), sort_keys=True).encode()).hexdigest()[:16]


# Reduced model and schedule used for CPU-budget training runs at 64x64.
DESK_OVERRIDES = {
    "model.backbone_widths": "8,16,32,32",
    "model.convs_per_stage": "1",
    "model.d_q": "32",
    "model.query_channels": "8",
    "model.query_size": "4",
    "model.camp_dim": "16",
    "train.epochs": "4",
    "train.lr": "0.02",
    "train.backbone_lr_mult": "0.5",
    "train.grad_clip": "5",
    "train.lr_schedule": "cosine",
}


def desk_config() -> TrainConfig:
    cfg = TrainConfig()
    for key, value in DESK_OVERRIDES.items():
        set_value(cfg, key, value)
    return cfg
