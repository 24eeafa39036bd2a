"""Run configuration: flat ``key = value`` files with dotted keys.

Example::

    # desk-scale run
    seed = 0
    data.root = runs/synthA
    train.n_iterations = 600
    mam.upsample = bilinear

Unknown keys, duplicates, unparsable values and out-of-range values raise
``ConfigError`` naming the key. Overrides use the same ``key=value`` syntax
and are applied after the file. The config hash is a SHA-256 over the fully
resolved settings serialised with sorted keys, so a value set in the file
and the same value passed as an override hash identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from .backbone import ALIGN_MODES, VARIANTS, BackboneConfig
from .ccm import ASPP_RATES
from .data import FoldSpec, build_fold_spec, load_fold_override
from .errors import ConfigError
from .mam import UPSAMPLE_MODES
from .model import ModelConfig
from .train import LOSSES, OPTIMIZERS, TrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _one_of(choices):
    def check(v):
        return v in choices
    check.__doc__ = f"one of {tuple(choices)}"
    return check


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    help: str = ""


SCHEMA: Dict[str, Field] = {
    "seed": Field(int, 0),
    "deterministic": Field(_bool, True, help="disable nondeterministic kernels"),
    "data.root": Field(str, ""),
    "data.n_classes": Field(int, 4, _positive),
    "data.classes_per_fold": Field(int, 2, _positive),
    "data.fold": Field(int, 0, _non_negative),
    "data.fold_file": Field(str, "", help="JSON fold override"),
    "model.variant": Field(str, "tiny_random", _one_of(VARIANTS)),
    "model.weights_path": Field(str, ""),
    "model.block4_out_channels": Field(int, 64, lambda v: v > 0 and v % 2 == 0),
    "model.adapter_enabled": Field(_bool, True),
    "model.align": Field(str, "auto", _one_of(("auto",) + ALIGN_MODES)),
    "model.init_seed": Field(int, 0),
    "mam.upsample": Field(str, "bilinear", _one_of(UPSAMPLE_MODES)),
    "ccm.aspp_rates": Field(_int_tuple, ASPP_RATES, lambda v: len(v) > 0 and min(v) >= 1),
    "train.learning_rate": Field(float, 2.5e-3, _positive),
    "train.optimizer": Field(str, "sgd", _one_of(OPTIMIZERS)),
    "train.momentum": Field(float, 0.9, lambda v: 0 <= v < 1),
    "train.weight_decay": Field(float, 0.0, _non_negative),
    "train.poly_power": Field(float, 0.9, _non_negative),
    "train.n_iterations": Field(int, 1000, _non_negative),
    "train.batch_size": Field(int, 8, _positive),
    "train.loss": Field(str, "balanced_bce", _one_of(LOSSES)),
    "train.checkpoint_every": Field(int, 0, _non_negative),
    "eval.n_episodes": Field(int, 1000, _positive),
    "eval.seed": Field(int, 0),
    "output.dir": Field(str, "runs/default"),
    "output.metrics": Field(str, "", help="JSON-lines file; default <output.dir>/metrics.jsonl"),
}


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        raw[key] = value
    return raw


def _coerce(key: str, text: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", key)
    spec = SCHEMA[key]
    try:
        value = spec.parse(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})", key) from exc
    if spec.check is not None and not spec.check(value):
        why = spec.check.__doc__ or "out of range"
        raise ConfigError(f"value {value!r} for {key!r} rejected: {why}", key)
    return value


class Config:
    """Resolved, validated settings. Index with dotted keys."""

    def __init__(self, values: Dict[str, Any]):
        self._values = dict(values)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def as_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self._values.items())}

    def canonical(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, overrides: Iterable[str]) -> "Config":
        values = dict(self._values)
        values.update({k: _coerce(k, v) for k, v in parse_lines(overrides, "<override>").items()})
        return Config(values)

    # --- typed views --------------------------------------------------------
    def backbone_config(self) -> BackboneConfig:
        align = self["model.align"]
        return BackboneConfig(
            variant=self["model.variant"],
            weights_path=self["model.weights_path"] or None,
            block4_out_channels=self["model.block4_out_channels"],
            adapter_enabled=self["model.adapter_enabled"],
            align=None if align == "auto" else align,
            init_seed=self["model.init_seed"],
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone_config(), self["mam.upsample"], tuple(self["ccm.aspp_rates"]))

    def fold(self) -> FoldSpec:
        if self["data.fold_file"]:
            return load_fold_override(self["data.fold_file"], self["data.n_classes"])
        return build_fold_spec(self["data.fold"], self["data.n_classes"], self["data.classes_per_fold"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            fold=self.fold(),
            learning_rate=self["train.learning_rate"],
            n_iterations=self["train.n_iterations"],
            batch_size=self["train.batch_size"],
            seed=self["seed"],
            loss=self["train.loss"],
            checkpoint_every=self["train.checkpoint_every"],
            optimizer=self["train.optimizer"],
            momentum=self["train.momentum"],
            weight_decay=self["train.weight_decay"],
            poly_power=self["train.poly_power"],
        )

    def metrics_path(self) -> Path:
        return Path(self["output.metrics"] or Path(self["output.dir"]) / "metrics.jsonl")


def defaults() -> Config:
    return Config({k: f.default for k, f in SCHEMA.items()})


def from_dict(values: Dict[str, Any]) -> Config:
    """Rebuild a config from ``Config.as_dict`` output (e.g. a checkpoint header)."""
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}", unknown[0])
    merged = {k: f.default for k, f in SCHEMA.items()}
    for k, v in values.items():
        merged[k] = tuple(v) if isinstance(SCHEMA[k].default, tuple) else v
    return Config(merged)


def parse_config(path=None, overrides: Iterable[str] = ()) -> Config:
    values = {k: f.default for k, f in SCHEMA.items()}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for key, raw in parse_lines(text.splitlines(), str(path)).items():
            values[key] = _coerce(key, raw)
    return Config(values).with_overrides(overrides)
