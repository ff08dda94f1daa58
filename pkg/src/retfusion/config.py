"""Run configuration: flat key=value files, override flags, and the
RET_SEED environment variable.

Precedence, lowest to highest: built-in defaults, config file, command
line overrides, RET_SEED (seed only).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .encoder import EncoderConfig, select_layer_indices
from .errors import ConfigError

ENV_SEED = "RET_SEED"


@dataclass
class RunConfig:
    # encoder architecture (desk-scale defaults)
    num_steps: int = 3
    num_tokens: int = 4
    width: int = 32
    late_width: int = 16
    heads: int = 2
    text_dim: int = 24
    vis_dim: int = 24
    text_layer_indices: list | None = None
    vis_layer_indices: list | None = None
    normalize_rows: bool = False
    forget_bias: float = 0.0
    input_bias: float = 0.0
    # optimization
    learning_rate: float = 5e-5
    train_steps: int = 500
    batch_size: int = 8
    tau: float = 0.05
    seed: int = 0
    # paths
    data_dir: str | None = None
    model_path: str | None = None
    index_path: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.train_steps < 1:
            raise ConfigError(f"train_steps must be >= 1, got {self.train_steps}")
        self.encoder_config(resolve_depth=None)

    def encoder_config(self, resolve_depth: tuple | None = None) -> EncoderConfig:
        """Build the encoder configuration, deriving layer indices from
        backbone depths when none are configured.

        ``resolve_depth`` is (text_depth, vis_depth); it is required
        only when an index list is absent.
        """
        text_idx, vis_idx = self.text_layer_indices, self.vis_layer_indices
        if text_idx is None:
            text_idx = (select_layer_indices(resolve_depth[0], self.num_steps)
                        if resolve_depth else list(range(self.num_steps)))
        if vis_idx is None:
            vis_idx = (select_layer_indices(resolve_depth[1], self.num_steps)
                       if resolve_depth else list(range(self.num_steps)))
        cfg = EncoderConfig(
            num_steps=self.num_steps, num_tokens=self.num_tokens, width=self.width,
            late_width=self.late_width, heads=self.heads,
            text_layer_indices=list(text_idx), vis_layer_indices=list(vis_idx),
            source_dims=(self.text_dim, self.vis_dim),
            normalize_rows=self.normalize_rows,
            b_forget=self.forget_bias, b_input=self.input_bias,
        )
        cfg.validate()
        return cfg


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}
_INT_KEYS = {"num_steps", "num_tokens", "width", "late_width", "heads", "text_dim",
             "vis_dim", "train_steps", "batch_size", "seed"}
_FLOAT_KEYS = {"learning_rate", "tau", "forget_bias", "input_bias"}
_BOOL_KEYS = {"normalize_rows"}
_LIST_KEYS = {"text_layer_indices", "vis_layer_indices"}
_PATH_KEYS = {"data_dir", "model_path", "index_path", "out_dir"}


def _coerce(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            lowered = value.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if key in _LIST_KEYS:
            stripped = value.strip()
            return [int(v) for v in stripped.split(",")] if stripped else None
        if key in _PATH_KEYS:
            return value.strip() or None
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    raise ConfigError(f"unknown config key: {key!r}")


def parse_config_file(path: str) -> dict:
    """Parse a flat key=value file; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, value = stripped.split("=", 1)
            key = key.strip()
            values[key] = _coerce(key, value.strip())
    return values


def build_run_config(config_path: str | None = None,
                     overrides: list | None = None) -> RunConfig:
    """Assemble a validated RunConfig from file plus KEY=VALUE overrides."""
    cfg = RunConfig()
    merged = {}
    if config_path:
        merged.update(parse_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = _coerce(key.strip(), value.strip())
    for key, value in merged.items():
        setattr(cfg, key, value)
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env_seed!r}") from exc
    cfg.validate()
    return cfg
