"""Pipeline configuration: one JSON file with full defaults, flag-overridable.

The config hash covers every semantic field but not filesystem paths, so
two runs of the same experiment in different directories share a hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import UsageError


@dataclass
class QCSettings:
    m_min: float = 0.2
    varl_min: float = 100.0
    exclude_border: bool = False


@dataclass
class StainSettings:
    enabled: bool = True
    reference_path: str | None = None  # None: built-in canonical H&E target


@dataclass
class MCSettings:
    T: int = 20
    dropout_rate: float = 0.5


@dataclass
class FilterSettings:
    tau: float | None = None
    keep_fraction: float | None = 0.8

    def __post_init__(self):
        if (self.tau is None) == (self.keep_fraction is None):
            raise UsageError("filter: set exactly one of tau / keep_fraction")


@dataclass
class HeadSettings:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    hidden: int = 256
    dropout_rate: float = 0.5
    feature_jitter: float = 0.0


@dataclass
class GASettings:
    population: int = 50
    generations: int = 50
    tournament_size: int = 2
    crossover_prob: float = 0.9
    mutation_prob: float = 0.1
    per_gene_flip_rate: float | None = None
    init_density: float = 0.05


@dataclass
class SplitSettings:
    train_fraction: float = 0.8
    val_fraction: float = 0.2

    def __post_init__(self):
        if abs(self.train_fraction + self.val_fraction - 1.0) > 1e-9:
            raise UsageError("split fractions must sum to 1")


_SECTIONS = {
    "qc": QCSettings,
    "stain": StainSettings,
    "mc": MCSettings,
    "filter": FilterSettings,
    "head": HeadSettings,
    "ga": GASettings,
    "split": SplitSettings,
}

# paths are excluded from the config hash
_PATH_FIELDS = ("slides_dir", "work_dir", "labels_csv")


@dataclass
class PipelineConfig:
    slides_dir: str
    work_dir: str
    seed: int
    labels_csv: str | None = None
    embed_dim: int = 512
    k_min: int = 16
    toy_embed_augment: bool = False
    qc: QCSettings = field(default_factory=QCSettings)
    stain: StainSettings = field(default_factory=StainSettings)
    mc: MCSettings = field(default_factory=MCSettings)
    filter: FilterSettings = field(default_factory=FilterSettings)
    head: HeadSettings = field(default_factory=HeadSettings)
    ga: GASettings = field(default_factory=GASettings)
    split: SplitSettings = field(default_factory=SplitSettings)

    def __post_init__(self):
        if Path(self.slides_dir).resolve() == Path(self.work_dir).resolve():
            raise UsageError("slides_dir and work_dir must be distinct paths")
        if self.k_min < 2:
            raise UsageError("k_min must be >= 2")

    @property
    def labels_path(self) -> Path:
        if self.labels_csv is not None:
            return Path(self.labels_csv)
        return Path(self.slides_dir) / "labels.csv"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "seed" not in data:
            raise UsageError("config must set an explicit seed (no wall-clock default)")
        for name in ("slides_dir", "work_dir"):
            if name not in data:
                raise UsageError(f"config must set {name}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in _SECTIONS and isinstance(value, dict):
                section_cls = _SECTIONS[key]
                section_known = {f.name for f in dataclasses.fields(section_cls)}
                bad = set(value) - section_known
                if bad:
                    raise UsageError(f"unknown keys in config section {key!r}: {sorted(bad)}")
                kwargs[key] = section_cls(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        data = self.to_dict()
        for name in _PATH_FIELDS:
            data.pop(name, None)
        canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def stage_hash(self, *fields: str) -> str:
        """Hash of the named config fields only; used for per-stage staleness
        so an override of, say, the GA settings does not invalidate tiling."""
        data = self.to_dict()
        subset = {name: data[name] for name in sorted(fields)}
        canon = json.dumps(subset, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def default_config(slides_dir: str, work_dir: str, seed: int) -> PipelineConfig:
    return PipelineConfig(slides_dir=slides_dir, work_dir=work_dir, seed=seed)
