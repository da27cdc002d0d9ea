"""Run configuration: one JSON document covering every pipeline stage.

Each section maps onto one of the package's config dataclasses. Missing keys
take the dataclass defaults, unknown keys are rejected, and the digest is the
SHA-256 of the canonical serialization of the fully resolved document.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .fmcw_sim import RadarConfig, config_digest
from .heads import HeadTrainConfig, LossConfig
from .learnable_sp import InitScheme
from .teacher import AOA_METHODS, CfarConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetConfig:
    target_count_min: int = 1
    target_count_max: int = 4
    amplitude_min: float = 0.5
    amplitude_max: float = 2.0
    on_grid: bool = False
    min_separation_bins: float = 0.0
    grid_jitter: float = 0.0

    def __post_init__(self):
        if not 0 <= self.target_count_min <= self.target_count_max:
            raise ValueError("need 0 <= target_count_min <= target_count_max")
        if not 0 < self.amplitude_min <= self.amplitude_max:
            raise ValueError("need 0 < amplitude_min <= amplitude_max")
        if not 0 <= self.grid_jitter < 1:
            raise ValueError("grid_jitter must lie in [0, 1)")

    @property
    def target_count_range(self):
        return (self.target_count_min, self.target_count_max)

    @property
    def amplitude_range(self):
        return (self.amplitude_min, self.amplitude_max)


@dataclass(frozen=True)
class TeacherConfig:
    aoa: str = "fft"
    n_sources: int = 1
    window: str = "hann"

    def __post_init__(self):
        if self.aoa not in AOA_METHODS:
            raise ValueError(f"unknown aoa method {self.aoa!r}; expected one of {AOA_METHODS}")
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "data"
    teacher: str = "data/teacher"
    runs: str = "runs"
    reports: str = "reports"


def _section(cls, raw, name, skip=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"config section {name!r} must be an object")
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    extra = sorted(set(raw) - set(names))
    if extra:
        raise ValueError(f"unknown keys in config section {name!r}: {extra}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in raw:
            v = raw[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"config section {name!r}: {exc}") from exc


def _plain(obj):
    if hasattr(obj, "to_dict"):
        d = obj.to_dict()
    else:
        d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d))


@dataclass(frozen=True)
class RunConfig:
    radar: RadarConfig = field(default_factory=RadarConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    cfar: CfarConfig = field(default_factory=CfarConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    init: InitScheme = field(default_factory=InitScheme)
    head: HeadTrainConfig = field(default_factory=HeadTrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    SECTIONS = ("radar", "dataset", "teacher", "cfar", "train", "loss", "init", "head", "paths")

    def to_dict(self):
        d = {name: _plain(getattr(self, name)) for name in self.SECTIONS}
        d["head"].pop("loss", None)
        return d

    def digest(self):
        return config_digest(self.to_dict())

    def head_config(self):
        """Head training settings with this config's loss weights."""
        return dataclasses.replace(self.head, loss=self.loss)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ValueError("run config must be a JSON object")
        extra = sorted(set(raw) - set(cls.SECTIONS))
        if extra:
            raise ValueError(f"unknown top-level config keys: {extra}")
        parts = {
            "radar": _section(RadarConfig, raw.get("radar"), "radar"),
            "dataset": _section(DatasetConfig, raw.get("dataset"), "dataset"),
            "teacher": _section(TeacherConfig, raw.get("teacher"), "teacher"),
            "cfar": _section(CfarConfig, raw.get("cfar"), "cfar"),
            "train": _section(TrainConfig, raw.get("train"), "train"),
            "loss": _section(LossConfig, raw.get("loss"), "loss"),
            "init": _section(InitScheme, raw.get("init"), "init"),
            "head": _section(HeadTrainConfig, raw.get("head"), "head", skip=("loss",)),
            "paths": _section(PathsConfig, raw.get("paths"), "paths"),
        }
        return cls(**parts)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
