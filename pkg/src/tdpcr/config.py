"""Project configuration: one YAML file with a section per component, plus
dotted ``key=value`` command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .experiments import BenchmarkConfig
from .network import NetworkConfig
from .trainer import RunConfig

DATA_ENV = "TDPCR_DATA_DIR"
EVAL_MODES = ("full", "cr-only", "direct-seg", "multi-stage")


@dataclass
class DataConfig:
    root: str | None = None
    size: int = 256
    num_classes: int = 6
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    coverage_min: float = 0.1
    coverage_max: float = 0.9
    speckle_looks: int = 4
    base_seed: int = 0

    def resolved_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ENV)
        if not root:
            raise ConfigError(f"no dataset root: set data.root or ${DATA_ENV}")
        return Path(root)


@dataclass
class EvalConfig:
    mode: str = "full"
    split: str = "test"
    strips: int = 4
    direct_input: str = "cloudy"
    probe_steps: int = 800
    probe_crop: int | None = 32
    batch_size: int = 8


@dataclass
class VizConfig:
    split: str = "test"
    index: int = 0
    scope: str = "image"
    dataset_limit: int = 16


@dataclass
class ProjectConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: RunConfig = field(default_factory=RunConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    viz: VizConfig = field(default_factory=VizConfig)
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ProjectConfig)}


def _build_section(name: str, values: dict):
    cls = SECTIONS[name]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from e


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"override key must be <section>.<key> with section in {sorted(SECTIONS)}, got {key!r}")
    return parts[0], parts[1], yaml.safe_load(raw) if raw.strip() else None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ProjectConfig:
    raw: dict = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a mapping of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    merged = {name: dict(raw.get(name) or {}) for name in SECTIONS}
    for text in overrides or []:
        section, key, value = parse_override(text)
        merged[section][key] = value
    cfg = ProjectConfig(**{name: _build_section(name, values) for name, values in merged.items()})
    if cfg.network.num_classes != cfg.data.num_classes:
        raise ConfigError(f"network.num_classes ({cfg.network.num_classes}) != data.num_classes "
                          f"({cfg.data.num_classes})")
    if cfg.network.branch_mode != cfg.train.branch_mode:
        raise ConfigError(f"network.branch_mode ({cfg.network.branch_mode}) != train.branch_mode "
                          f"({cfg.train.branch_mode})")
    if cfg.eval.mode not in EVAL_MODES:
        raise ConfigError(f"eval.mode must be one of {EVAL_MODES}")
    if cfg.viz.scope not in ("image", "dataset"):
        raise ConfigError("viz.scope must be 'image' or 'dataset'")
    return cfg
