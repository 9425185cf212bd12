"""Pipeline configuration: one JSON document, strict keys, stable defaults.

Every tunable the pipeline exposes lives here so a run can be reproduced
from the config echo written next to its outputs. CLI flags override file
values; the environment variables ``SGR_PROVIDER_ENDPOINT`` and
``SGR_PROVIDER_TIMEOUT_S`` override the provider block.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SgrError
from .providers import ProviderConfig


class ConfigError(SgrError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    alpha_mask: float = 0.4
    alpha_bbox: float = 0.4
    alpha_label: float = 0.2


@dataclass(frozen=True)
class ReconstructionConfig:
    voxel_size: float = 0.1
    min_cluster_voxels: int = 5
    merge_iou: float = 0.25
    place_min_sep: float = 0.8
    place_neighbor_k: int = 4
    door_radius: float = 0.3
    room_cycle_stride: int = 2
    free_band_z_min: float = 0.1
    free_band_z_max: float = 1.8


@dataclass(frozen=True)
class RoomConfig:
    feature_clusters: int = 5


@dataclass(frozen=True)
class SearchConfig:
    object_threshold: float = 0.25
    room_threshold: float = 0.25
    label_prompt_template: str = "{}"


@dataclass(frozen=True)
class ReasoningConfig:
    max_retries: int = 2
    max_pairs_per_subtask: int = 8
    room_scope: str = "never"  # never | always | auto


@dataclass(frozen=True)
class IngestConfig:
    min_detection_confidence: float = 0.0


@dataclass(frozen=True)
class RelationsConfig:
    max_pairs_per_frame: int = 20
    max_pair_centroid_px: float | None = None  # None: gate at the image diagonal
    keep_pair_crops: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    rooms: RoomConfig = field(default_factory=RoomConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    reasoning: ReasoningConfig = field(default_factory=ReasoningConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    relations: RelationsConfig = field(default_factory=RelationsConfig)


_SECTIONS = {
    "provider": ProviderConfig,
    "fusion": FusionConfig,
    "reconstruction": ReconstructionConfig,
    "rooms": RoomConfig,
    "search": SearchConfig,
    "reasoning": ReasoningConfig,
    "ingest": IngestConfig,
    "relations": RelationsConfig,
}


def _build_section(cls, doc: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def config_from_dict(doc: dict) -> PipelineConfig:
    unknown = set(doc) - (set(_SECTIONS) | {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {}
    if "seed" in doc:
        kwargs["seed"] = int(doc["seed"])
    for section, cls in _SECTIONS.items():
        if section in doc:
            if not isinstance(doc[section], dict):
                raise ConfigError(f"'{section}' must be an object")
            kwargs[section] = _build_section(cls, doc[section], section)
    config = PipelineConfig(**kwargs)
    if config.provider.seed != config.seed and "seed" not in doc.get("provider", {}):
        # provider inherits the pipeline seed unless explicitly pinned
        config = dataclasses.replace(
            config, provider=dataclasses.replace(config.provider, seed=config.seed)
        )
    return config


def apply_env_overrides(config: PipelineConfig) -> PipelineConfig:
    endpoint = os.environ.get("SGR_PROVIDER_ENDPOINT")
    timeout = os.environ.get("SGR_PROVIDER_TIMEOUT_S")
    if endpoint is None and timeout is None:
        return config
    updates: dict = {}
    if endpoint is not None:
        updates["endpoint"] = endpoint
        updates["kind"] = "remote"
    if timeout is not None:
        try:
            updates["timeout_s"] = float(timeout)
        except ValueError as exc:
            raise ConfigError(f"SGR_PROVIDER_TIMEOUT_S must be a number: {timeout!r}") from exc
    return dataclasses.replace(config, provider=dataclasses.replace(config.provider, **updates))


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``section.key=value`` strings (JSON-parsed values) over the config."""
    doc = config_to_dict(config)
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override must look like section.key=value, got {override!r}")
        dotted, raw = override.split("=", 1)
        parts = dotted.strip().split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are convenient on the command line
        target = doc
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            target = target[part]
        target[parts[-1]] = value
    return config_from_dict(doc)


def config_to_dict(config: PipelineConfig) -> dict:
    doc = dataclasses.asdict(config)
    return doc


def load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        config = PipelineConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config top level must be an object")
        config = config_from_dict(doc)
    return apply_env_overrides(config)


def echo_config(config: PipelineConfig, out_dir: Path) -> Path:
    """Write the effective config next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(
        json.dumps(config_to_dict(config), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return path
