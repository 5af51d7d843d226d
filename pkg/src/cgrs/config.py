"""Pipeline configuration: TOML file with flat sections per stage,
overridable by explicit CLI flags.

Defaults carry the standard operating constants: fusion weight 0.3,
coarse depth 20, caption token limit 256, and spatial weight 0.1 for the
losscheck suite.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .captions import ProviderConfig
from .exceptions import ConfigError, ValidationError
from .types import FusionConfig

DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class EmbedderConfig:
    embedder_id: str = "mock-hash"
    dim: int = 384
    endpoint: Optional[str] = None
    manifest: Optional[str] = None
    embeddings: Optional[str] = None

    def __post_init__(self):
        if self.embedder_id not in ("mock-hash", "file", "http"):
            raise ConfigError(f"unknown embedder_id {self.embedder_id!r}")
        if self.dim < 1:
            raise ConfigError("embedder dim must be >= 1")
        if self.embedder_id == "http" and not self.endpoint:
            raise ConfigError("http embedder requires an endpoint")
        if self.embedder_id == "file" and not (self.manifest and self.embeddings):
            raise ConfigError("file embedder requires manifest and embeddings paths")


@dataclass(frozen=True)
class PathsConfig:
    gallery_manifest: Optional[str] = None
    gallery_embeddings: Optional[str] = None
    query_manifest: Optional[str] = None
    query_embeddings: Optional[str] = None
    captions: Optional[str] = None
    cache: Optional[str] = None
    qrels: Optional[str] = None
    output_dir: str = "out"


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    n_shards: int = 1
    seed: int = 0
    spatial_weight: float = DEFAULT_LAMBDA

    def to_dict(self) -> dict:
        return asdict(self)


def _section(data: dict, name: str) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return sec


def _build(cls, section: dict, name: str):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


def load_config(path) -> PipelineConfig:
    """Parse a TOML config file into a PipelineConfig."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {p}: {exc}") from exc

    fusion_sec = dict(_section(data, "fusion"))
    if "k_report" in fusion_sec:
        fusion_sec["k_report"] = tuple(fusion_sec["k_report"])
    run_sec = _section(data, "run")
    known_run = {"n_shards", "seed", "spatial_weight"}
    unknown = set(run_sec) - known_run
    if unknown:
        raise ConfigError(f"unknown keys in [run]: {sorted(unknown)}")
    return PipelineConfig(
        paths=_build(PathsConfig, _section(data, "paths"), "paths"),
        fusion=_build(FusionConfig, fusion_sec, "fusion"),
        provider=_build(ProviderConfig, _section(data, "provider"), "provider"),
        embedder=_build(EmbedderConfig, _section(data, "embedder"), "embedder"),
        n_shards=run_sec.get("n_shards", 1),
        seed=run_sec.get("seed", 0),
        spatial_weight=run_sec.get("spatial_weight", DEFAULT_LAMBDA),
    )


def override(config: PipelineConfig, **updates) -> PipelineConfig:
    """Return a config with non-None updates applied; explicit flags win
    over file values."""
    clean = {k: v for k, v in updates.items() if v is not None}
    return replace(config, **clean) if clean else config
