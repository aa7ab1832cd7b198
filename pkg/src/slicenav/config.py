"""Experiment configuration: strict JSON schema, defaults, content hash.

Unknown keys are rejected so silently-ignored typos cannot skew runs; every
artifact directory embeds the resolved config and its hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

__all__ = ["ExperimentConfig", "load_config", "resolved_config_json", "config_hash"]


@dataclass
class DataConfig:
    subjects: int = 4
    dims: list[int] = field(default_factory=lambda: [32, 32, 32])
    trajectories_per_subject: int = 6
    frames_per_trajectory: int = 24
    stride: int = 4
    policy: str = "smooth_random"
    walk_span: float = 1.0
    split_ratios: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.25])
    targets: list[str] = field(default_factory=lambda: ["region", "tissue", "coords"])


@dataclass
class RenderConfigSection:
    out_h: int = 32
    out_w: int = 32
    base_extent: float = 1.0
    fill_value: float = 0.0


@dataclass
class TokenizerConfig:
    patch_size: int = 8
    width: int = 48
    depth: int = 2
    heads: int = 4
    dec_width: int = 48
    dec_depth: int = 1
    mlp_ratio: int = 4
    mask_ratio: float = 0.75
    lambda_perc: float = 0.0
    steps: int = 200
    batch_size: int = 32
    lr: float = 5e-3
    weight_decay: float = 0.01
    warmup: int = 20


@dataclass
class DynamicsConfig:
    width: int = 96
    depth: int = 2
    heads: int = 4
    pack_window: int = 2
    context: int = 16  # training window == t_max, covering the largest sweep K
    m_max: int = 3
    lambda_sc: float = 0.5
    weighting: str = "uniform"
    steps: int = 300
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 0.01
    diag_every: int = 10
    diag_sigma: float = 0.5


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 5
    lr: float = 3e-3
    batch_size: int = 16
    k: int = 8


@dataclass
class CompareConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: list[int] = field(default_factory=lambda: [1, 3, 5])
    tasks: list[str] = field(default_factory=lambda: ["region_seg", "tissue_seg",
                                                      "coord_field"])


@dataclass
class SweepConfig:
    ks: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 5
    tasks: list[str] = field(default_factory=lambda: ["region_seg", "tissue_seg",
                                                      "coord_field"])
    latency_runs: int = 100


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    render: RenderConfigSection = field(default_factory=RenderConfigSection)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_SECTION_CLASSES = {
    "data": DataConfig,
    "render": RenderConfigSection,
    "tokenizer": TokenizerConfig,
    "dynamics": DynamicsConfig,
    "probe": ProbeConfig,
    "compare": CompareConfig,
    "sweep": SweepConfig,
}


def _build_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    return cls(**data)


def load_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse and validate a config file or dict; unknown keys are errors."""
    if isinstance(source, (str, Path)):
        try:
            data = json.loads(Path(source).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {source}", code="missing_config") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    else:
        data = dict(source)
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    top_level = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - top_level
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTION_CLASSES:
            kwargs[name] = _build_section(_SECTION_CLASSES[name], value, name)
        else:
            kwargs[name] = value
    return ExperimentConfig(**kwargs)


def resolved_config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, indent=1)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(resolved_config_json(cfg).encode()).hexdigest()
