"""Run configuration: flat ``key=value`` files with dotted section names.

Example::

    model_kind=crossmod
    way=5
    dataset.kind=synthetic
    dataset.resolution=32
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

SEED_ENV = "XMODNET_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    way: int = 5
    shot: int = 1
    queries_per_class_train: Optional[int] = None
    lr_initial: float = 0.001
    lr_halving_period: int = 100_000
    l1_factor: float = 0.001
    max_episodes: int = 300_000
    eval_every: int = 5000
    val_episodes: int = 200
    val_queries_per_class: int = 15
    seed: int = 0
    model_kind: str = "baseline"
    bn_mode: str = "eval"
    worker_count: int = 1
    precision: int = 32
    output_dir: str = "runs"
    # data
    dataset_kind: str = "synthetic"
    dataset_root: Optional[str] = None
    dataset_num_classes: int = 10
    dataset_per_class: int = 20
    dataset_resolution: int = 32
    dataset_mode: str = "separable"
    dataset_seed: int = 0
    # evaluation / ablation
    eval_episodes: int = 1000
    eval_queries_per_class: int = 15
    eval_split: str = "test"
    noise_blocks: str = "2,3,4"
    noise_mean: float = 1.0
    noise_std: float = 0.3
    noise_seed: int = 0

    def validate(self) -> "RunConfig":
        if self.model_kind not in ("baseline", "crossmod"):
            raise ConfigError(f"model_kind must be baseline or crossmod, got {self.model_kind!r}")
        if self.dataset_kind not in ("synthetic", "miniimagenet"):
            raise ConfigError(f"dataset.kind must be synthetic or miniimagenet, got {self.dataset_kind!r}")
        if self.dataset_mode not in ("separable", "pairwise"):
            raise ConfigError(f"dataset.mode must be separable or pairwise, got {self.dataset_mode!r}")
        if self.bn_mode not in ("eval", "batch"):
            raise ConfigError(f"bn_mode must be eval or batch, got {self.bn_mode!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train, val or test, got {self.eval_split!r}")
        for name in ("way", "shot", "lr_halving_period", "max_episodes", "val_episodes", "worker_count", "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{key_of(name)} must be positive")
        if self.lr_initial <= 0 or self.l1_factor < 0 or self.noise_std < 0:
            raise ConfigError("lr_initial must be positive; l1_factor and noise.std non-negative")
        if self.dataset_kind == "miniimagenet" and not self.dataset_root:
            raise ConfigError("dataset.root is required for miniimagenet")
        if self.dataset_root and not Path(self.dataset_root).is_dir():
            raise ConfigError(f"dataset root not found: {self.dataset_root}")
        parse_blocks(self.noise_blocks)
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{key_of(f.name)}={'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


_PREFIXES = ("dataset", "eval", "noise")


def key_of(attr: str) -> str:
    for prefix in _PREFIXES:
        if attr.startswith(prefix + "_"):
            return f"{prefix}.{attr[len(prefix) + 1:]}"
    return attr


def attr_of(key: str) -> str:
    return key.replace(".", "_")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(attr: str, raw: Any):
    f = _FIELDS[attr]
    if raw is None:
        return None
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    kind = str(f.type)
    if raw == "" and "Optional" in kind:
        return None
    try:
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key_of(attr)}: cannot parse {raw!r}") from exc
    return raw


def read_config_file(path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for key, raw in parser["run"].items():
        attr = attr_of(key)
        if attr not in _FIELDS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        values[attr] = _coerce(attr, raw)
    return values


def resolve(config_path=None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Defaults < config file < XMODNET_SEED (only if no seed given) < overrides."""
    values: dict[str, Any] = {}
    if config_path:
        values.update(read_config_file(config_path))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" not in values and "seed" not in overrides and os.environ.get(SEED_ENV):
        try:
            values["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    for attr, value in overrides.items():
        if attr not in _FIELDS:
            raise ConfigError(f"unknown setting {attr!r}")
        values[attr] = _coerce(attr, value)
    return RunConfig(**values).validate()


def parse_blocks(text: str) -> tuple[int, ...]:
    text = (text or "").strip()
    if text in ("", "none"):
        return ()
    try:
        blocks = tuple(sorted({int(t) for t in text.split(",") if t.strip()}))
    except ValueError as exc:
        raise ConfigError(f"bad block list {text!r}") from exc
    if any(b not in (2, 3, 4) for b in blocks):
        raise ConfigError(f"blocks must be among 2,3,4, got {text!r}")
    return blocks
