"""Run configuration: one YAML or JSON file, fully defaulted, echoed back as ``config.resolved``.

Schema (every key optional)::

    seed: 0
    dataset:
      kind: synthetic            # or "binary"
      synthetic: {classes: 4, side: 16, train: 4000, test: 1000, noise: 0.12}
      binary: {directory: null, classes: null, cap: null}
    search:                      # SearchConfig fields
      layers: 8
      sampler: {n_arch: 5, n_policy: 2}
      optim: {warmup_epochs: 20, joint_epochs: 30, ...}
    eval: {cells: 8, channels: 16, epochs: 60, batch_size: 64, augmentation: derived-policy}
    output: {run_root: runs, name: null}

The top-level ``seed`` seeds dataset generation, the search and the evaluation.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import artifacts
from .data import SyntheticSpec
from .evaluation import EvalConfig
from .search import SearchConfig

RUN_ROOT_ENV = "JOINTSEARCH_RUN_ROOT"
CONFIG_SCHEMA = "jointsearch.config"
CONFIG_VERSION = "1.0"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BinarySource:
    directory: str | None = None
    classes: tuple[int, ...] | None = None
    cap: int | None = None


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: SyntheticSpec = SyntheticSpec()
    binary: BinarySource = BinarySource()

    def __post_init__(self):
        if self.kind not in ("synthetic", "binary"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'binary', got {self.kind!r}")
        if self.kind == "binary" and not self.binary.directory:
            raise ConfigError("dataset.binary.directory is required when dataset.kind is 'binary'")


@dataclass(frozen=True)
class OutputConfig:
    run_root: str = "runs"
    name: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = DatasetConfig()
    search: SearchConfig = SearchConfig()
    eval: EvalConfig = EvalConfig()
    output: OutputConfig = OutputConfig()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def run_dir(self, default_name: str = "run") -> Path:
        root = os.environ.get(RUN_ROOT_ENV) or self.output.run_root
        return Path(root) / (self.output.name or default_name)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ----------------------------------------------------------------------------- building


def _check_value(path: str, value: Any, default: Any):
    """Coerce ``value`` to the kind of the field default, or raise naming the key."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if default is None:
        if isinstance(value, list):
            return tuple(value)
        return value
    return value


def _build(cls, data: Mapping | None, path: str, forbid: tuple[str, ...] = ()):
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        if name in forbid:
            raise ConfigError(f"{key}: set the top-level 'seed' instead")
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _check_value(key, value, default)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def build_config(doc: Mapping | None) -> RunConfig:
    doc = dict(doc or {})
    for section in ("search", "eval"):
        if isinstance(doc.get(section), Mapping) and "seed" in doc[section]:
            raise ConfigError(f"{section}.seed: set the top-level 'seed' instead")
    cfg = _build(RunConfig, doc, "")
    try:
        cfg.dataset.synthetic.validate()
    except ValueError as exc:
        raise ConfigError(f"dataset.synthetic: {exc}") from None
    return dataclasses.replace(
        cfg, search=dataclasses.replace(cfg.search, seed=cfg.seed), eval=dataclasses.replace(cfg.eval, seed=cfg.seed)
    )


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with ``value`` parsed as YAML (so numbers, booleans and lists work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty key")
    return parts, yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = dict(doc)
    for text in overrides:
        parts, value = parse_override(text)
        node = doc
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, Mapping) else {}
            node[p] = child
            node = child
        node[parts[-1]] = value
    return doc


def read_config_file(path: Path | str) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "header" in doc:
        # an echoed config.resolved: its per-stage seeds are copies of the top-level one
        artifacts.check_header(doc.pop("header"), CONFIG_SCHEMA, CONFIG_VERSION, path)
        doc |= _strip_seeds(doc)
    return doc


def load_config(path: Path | str | None = None, overrides: list[str] | None = None) -> RunConfig:
    doc = read_config_file(path) if path is not None else {}
    return build_config(apply_overrides(doc, overrides or []))


def write_resolved(path: Path, cfg: RunConfig) -> None:
    artifacts.write_json(path, CONFIG_SCHEMA, CONFIG_VERSION, cfg.to_dict())


def read_resolved(path: Path, overrides: list[str] | None = None) -> RunConfig:
    """Rebuild the config echoed into a run directory, optionally with further overrides."""
    doc = artifacts.read_json(path, CONFIG_SCHEMA, CONFIG_VERSION)
    doc.pop("header")
    return build_config(apply_overrides(doc | _strip_seeds(doc), overrides or []))


def _strip_seeds(doc: dict) -> dict:
    return {s: {k: v for k, v in doc[s].items() if k != "seed"} for s in ("search", "eval") if s in doc}
