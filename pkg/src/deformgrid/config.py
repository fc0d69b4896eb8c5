"""One configuration document drives every pipeline.

The JSON document mirrors the dataclass tree: top-level run settings plus
``dataset``, ``net``, and ``train`` sections. Loading is strict: unknown
keys anywhere in the tree are rejected so typos cannot silently fall back
to defaults. A sha256 digest of the canonical form is embedded in pipeline
outputs to tie artifacts to the exact configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .dataset import DatasetConfig
from .net.model import NetworkConfig
from .net.train import TrainingConfig

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Bad schema version, unknown key, or inconsistent settings."""


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    threads: int = 1
    deterministic: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self.schema_version} unsupported "
                f"(this build reads {SCHEMA_VERSION})"
            )
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.net.grid_n != self.dataset.grid_n:
            raise ConfigError(
                f"net grid_n {self.net.grid_n} != dataset grid_n "
                f"{self.dataset.grid_n}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build(cls, doc: dict, path: str):
    """Strict recursive dataclass construction from a plain dict."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'document'} must be an object, got {doc!r}")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} under {path or 'top level'}")
    kwargs = {}
    for key, value in doc.items():
        current = getattr(proto, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"{path}{key} must be an object, got {value!r}"
                )
            kwargs[key] = _build(type(current), value, f"{path}{key}.")
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)  # JSON has no tuples
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path or 'top level'}: {exc}")


def from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc, "")


def load(path) -> RunConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})")
    return from_dict(doc)


def save(cfg: RunConfig, path):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True, default=float)
        f.write("\n")


def desk_config() -> RunConfig:
    """Small grids and channel counts that train in CPU-minutes."""
    return RunConfig()


def large_config() -> RunConfig:
    """64-point grids and the channel schedule near 9.1M parameters."""
    return RunConfig(
        dataset=DatasetConfig(grid_n=64),
        net=NetworkConfig(grid_n=64, stage_channels=(40, 80, 160, 320)),
    )
