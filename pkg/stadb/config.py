import logging
import os
from pathlib import Path
from typing import Dict, Literal, Tuple, Union

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

logger = logging.getLogger(__name__)


class Config(BaseSettings):
    """Training/model configuration.

    Defaults are the desk-scale values; every field can also be set through
    a `STADB_<FIELD>` environment variable. Values from a config file win.
    Keys a file leaves out fall back to the environment first, so an empty
    file yields the defaults as changed by any `STADB_*` variables.
    """
    model_config = SettingsConfigDict(env_prefix="STADB_", extra="forbid")

    # --- Adaptive dropping ---
    alpha: float = Field(0.8, gt=0)
    drop_mode: Literal["threshold", "quantile", "random_block"] = "threshold"
    drop_quantile: float = Field(0.2, gt=0, le=1)
    block_ratio_h: float = Field(0.3, gt=0, le=1)
    block_ratio_w: float = Field(1.0, gt=0, le=1)
    attention_pooling: Literal["mean", "max"] = "mean"
    drop_pooling: Literal["gmp", "gap"] = "gmp"

    # --- Branch selection / ablation ---
    rho: float = Field(0.25, ge=0, le=1)
    use_drop: bool = True
    use_channel_attention: bool = True
    use_spatial_attention: bool = True

    # --- Attention ---
    reduction: int = Field(16, ge=1)
    spatial_kernel: int = Field(7, ge=1)
    spatial_merge: Literal["shared_sum", "concat"] = "shared_sum"
    mlp_bias: bool = False

    # --- Network ---
    image_height: int = Field(64, ge=1)
    image_width: int = Field(32, ge=1)
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 64)
    backbone_strides: Tuple[int, ...] = (2, 2, 2, 1)
    d1: int = Field(128, ge=1)
    d2: int = Field(64, ge=1)

    # --- Batches / losses ---
    p: int = Field(8, ge=2)
    n_per: int = Field(4, ge=2)
    ce_reduction: Literal["mean", "sum"] = "mean"
    triplet_reduction: Literal["mean", "sum"] = "sum"

    # --- Schedule ---
    epochs: int = Field(50, ge=1)
    iters_per_epoch: int = Field(0, ge=0)       # 0: n_train // (p * n_per)
    base_lr: float = Field(2e-4, gt=0)
    lr_warmup_epochs: int = Field(50, ge=0)
    lr_warmup_step: int = Field(5, ge=1)
    lr_decay1_epoch: int = Field(200, ge=0)
    lr_decay2_epoch: int = Field(300, ge=0)

    # --- Run ---
    seed: int = Field(0, ge=0, lt=2 ** 64)
    checkpoint_interval: int = Field(10, ge=0)
    eval_interval: int = Field(0, ge=0)
    k_max: int = Field(10, ge=1)

    @field_validator("backbone_channels", "backbone_strides", mode="before")
    @classmethod
    def _split_list(cls, value: Union[str, Tuple[int, ...]]):
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("backbone_channels", "backbone_strides")
    @classmethod
    def _positive_entries(cls, value: Tuple[int, ...]):
        if not value or any(v < 1 for v in value):
            raise ValueError("needs at least one entry, all positive")
        return value

    @field_validator("spatial_kernel")
    @classmethod
    def _odd_kernel(cls, value: int):
        if value % 2 == 0:
            raise ValueError("spatial kernel size must be odd")
        return value

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides need the same length")
        if self.lr_decay2_epoch < self.lr_decay1_epoch:
            raise ValueError("lr_decay2_epoch must not precede lr_decay1_epoch")
        return self

    @property
    def batch_size(self) -> int:
        return self.p * self.n_per

    @property
    def has_attention_branch(self) -> bool:
        return self.use_channel_attention or self.use_spatial_attention

    def dump(self) -> str:
        """Render in the `key = value` file format."""
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> Config:
    values: Dict[str, str] = {}
    line_of: Dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in Config.model_fields:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {line_of[key]})", line=lineno)
        if not value:
            raise ConfigError(f"missing value for {key!r}", line=lineno)
        values[key] = value
        line_of[key] = lineno

    try:
        return Config(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else None
        where = f"{key}: " if key else ""
        raise ConfigError(f"{where}{first['msg']}", line=line_of.get(key)) from e


def load_config(path: Union[str, Path]) -> Config:
    """Read a flat `key = value` UTF-8 file; missing keys come from `STADB_*` variables or the defaults."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config = parse_config_text(text)
    logger.info(f"Loaded config from {path} (alpha={config.alpha}, rho={config.rho})")
    return config


class ServiceSettings(BaseSettings):
    # --- Modell ---
    CHECKPOINT: str = ""
    GALLERY_DIR: str = ""

    # --- Trainingsläufe ---
    # Verzeichnis mit je einem Unterordner pro Lauf (log.jsonl + checkpoint_*.stdb)
    RUNS_DIR: str = "runs"

    # --- Server ---
    HOST: str = "0.0.0.0"
    PORT: int = 8000
    K_MAX: int = 10

    model_config = SettingsConfigDict(
        env_prefix="STADB_",
        env_file=os.path.join(os.path.dirname(__file__), ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = ServiceSettings()
