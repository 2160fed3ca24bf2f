"""Declarative pipeline configuration loaded from YAML."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Any

import yaml

from .ingest import ColumnSchema, SegmentationConfig
from .prompting import Variant
from .retrieval import RetrievalConfig


class ConfigError(ValueError):
    pass


@dataclass
class IngestSection:
    input: str = ""
    schema: dict = field(default_factory=dict)
    delta_t_hours: float = 24.0
    min_poi_visits: int = 10
    min_user_records: int = 10
    split_ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])

    def segmentation(self) -> SegmentationConfig:
        return SegmentationConfig(
            delta_t=timedelta(hours=self.delta_t_hours),
            min_poi_visits=self.min_poi_visits,
            min_user_records=self.min_user_records,
            split_ratios=tuple(self.split_ratios),
        )

    def column_schema(self) -> ColumnSchema:
        try:
            return ColumnSchema(**self.schema)
        except TypeError as exc:
            raise ConfigError(f"ingest.schema: {exc}") from exc


@dataclass
class PromptingSection:
    template: str | None = None
    variant: str = "full"


@dataclass
class EndpointSection:
    url: str = ""
    model: str = ""
    mode: str = "completion"
    max_new_tokens: int = 48
    batch_size: int = 64
    concurrency: int = 1
    max_attempts: int = 3
    backoff: float = 0.5
    timeout: float = 60.0


@dataclass
class EmbeddingSection:
    backend: str = "hashing"  # hashing | remote
    dim: int = 256
    endpoint: EndpointSection = field(default_factory=EndpointSection)


@dataclass
class RetrievalSection:
    history_checkin_budget: int = 300
    top_k_cap: int | None = None
    self_only: bool = False
    candidate_scope: str = "all_users"
    candidate_pool: str = "all"
    order: str = "similarity"


@dataclass
class CorpusSection:
    max_tokens: int = 32768
    chars_per_token: float = 4.0
    reserve_for_answer: int = 64
    plain: bool = False
    mask_test: bool = False


@dataclass
class InferenceSection:
    backend: str = "frequency"  # frequency | http
    corpus: str = "test"  # test | test_masked
    endpoint: EndpointSection = field(default_factory=EndpointSection)


@dataclass
class EvaluationSection:
    partitions: list = field(default_factory=lambda: ["user_activity", "trajectory_length"])


@dataclass
class PipelineConfig:
    workdir: str = "run"
    seed: int = 0
    workers: int = 1
    ingest: IngestSection = field(default_factory=IngestSection)
    prompting: PromptingSection = field(default_factory=PromptingSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    base_dir: Path = field(default=Path("."), repr=False)

    def resolve(self, path: str | None) -> Path | None:
        if path is None or path == "":
            return None
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def variant(self) -> Variant:
        return Variant(self.prompting.variant)

    def retrieval_config(self) -> RetrievalConfig:
        """Retrieval settings after applying the prompt variant."""
        r = self.retrieval
        cfg = RetrievalConfig(
            history_checkin_budget=r.history_checkin_budget,
            top_k_cap=r.top_k_cap,
            self_only=r.self_only,
            candidate_scope=r.candidate_scope,
            candidate_pool=r.candidate_pool,
            order=r.order,
        )
        if self.variant == Variant.NO_HISTORY:
            cfg = dataclasses.replace(cfg, history_checkin_budget=0)
        elif self.variant == Variant.SELF_HISTORY_ONLY:
            cfg = dataclasses.replace(cfg, self_only=True, order="recency")
        return cfg

    def effective_variant(self) -> Variant:
        """Variant label written to records; a zero history budget *is* the no-history variant."""
        v = self.variant
        if v in (Variant.FULL, Variant.SELF_HISTORY_ONLY) and self.retrieval_config().history_checkin_budget == 0:
            return Variant.NO_HISTORY
        return v

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def fingerprint(self) -> str:
        """Hash of everything that affects results; paths and parallelism knobs excluded."""
        d = self.to_dict()
        for key in ("workdir", "workers"):
            d.pop(key)
        d["ingest"].pop("input")
        d["prompting"].pop("template")
        for section in (d["embedding"], d["inference"]):
            for key in ("url", "concurrency", "batch_size", "timeout", "max_attempts", "backoff"):
                section["endpoint"].pop(key)
        return stable_hash(d)


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def _build(cls: type, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _validate(cfg: PipelineConfig) -> None:
    try:
        Variant(cfg.prompting.variant)
    except ValueError as exc:
        raise ConfigError(f"prompting.variant: {exc}") from exc
    if cfg.embedding.backend not in ("hashing", "remote"):
        raise ConfigError(f"embedding.backend must be 'hashing' or 'remote', got {cfg.embedding.backend!r}")
    if cfg.inference.backend not in ("frequency", "http"):
        raise ConfigError(f"inference.backend must be 'frequency' or 'http', got {cfg.inference.backend!r}")
    if cfg.inference.corpus not in ("test", "test_masked"):
        raise ConfigError(f"inference.corpus must be 'test' or 'test_masked', got {cfg.inference.corpus!r}")
    bad = set(cfg.evaluation.partitions) - {"user_activity", "trajectory_length"}
    if bad:
        raise ConfigError(f"evaluation.partitions: unknown partition(s) {sorted(bad)}")
    try:
        cfg.ingest.segmentation()
        cfg.ingest.column_schema()
        cfg.retrieval_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict, base_dir: str | Path = ".") -> PipelineConfig:
    cfg = _build(PipelineConfig, copy.deepcopy(data), "")
    cfg.base_dir = Path(base_dir)
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return config_from_dict(data, path.resolve().parent)
