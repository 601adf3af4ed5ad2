"""Run configuration: one YAML file holding every experiment knob.

Unknown keys, wrong types and out-of-range values are rejected with the
dotted path of the offending entry. ``RunConfig.hash()`` is a digest of the
resolved configuration, embedded in every output file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .denoise.training import TrainConfig
from .errors import ConfigurationError
from .pcdm import PcdmConfig
from .planner import PlannerConfig
from .scene import BranchSplit
from .schedule import build_vp_schedule
from .score import ScoreConfig
from .sim.scenarios import BUILDERS, SUITE

MODES = ("NR", "R")


@dataclass(frozen=True)
class ScheduleSection:
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    reference_steps: int = 1000


@dataclass(frozen=True)
class PcdmSection:
    K: int = 3
    N: int = 3
    H: int = 200
    t_b: float = 4.0  # [s]
    T: float = 8.0  # [s]
    deterministic: bool = False


@dataclass(frozen=True)
class PlannerSection:
    replan_period: float = 1.0  # [s]
    emergency_decel: float = -3.5  # [m/s^2]


@dataclass(frozen=True)
class DataSection:
    variants: int = 20
    seed: int = 0
    duration: float = 25.0  # [s] per expert rollout
    stride: int = 10
    perturbed: float = 0.5


@dataclass(frozen=True)
class TrainSection(TrainConfig):
    dropout: float = 0.5


@dataclass(frozen=True)
class CheckpointSection:
    shared: str | None = None  # None selects the packaged models
    full: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    modes: tuple = MODES
    scenarios: tuple = SUITE
    out: str = "runs"
    workers: int = 1
    dt: float = 0.1
    episode_steps: int = 150
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    pcdm: PcdmSection = field(default_factory=PcdmSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    checkpoints: CheckpointSection = field(default_factory=CheckpointSection)

    def __post_init__(self):
        _check(self.workers >= 1, "workers", "must be at least 1")
        _check(self.episode_steps >= 1, "episode_steps", "must be positive")
        _check(abs(self.dt - 0.1) < 1e-12, "dt", "the simulator runs at 0.1 s")
        _check(len(self.seeds) > 0, "seeds", "must not be empty")
        _check(len(self.scenarios) > 0, "scenarios", "must not be empty")
        for m in self.modes:
            _check(m in MODES, "modes", f"unknown mode {m!r}; expected one of {MODES}")
        for name in self.scenarios:
            _check(name in BUILDERS or Path(name).is_file(), "scenarios",
                   f"{name!r} is neither a shipped scenario nor an existing file")
        for role in ("shared", "full"):
            path = getattr(self.checkpoints, role)
            _check(path is None or Path(path).is_file(), f"checkpoints.{role}", f"file {path!r} does not exist")
        p = self.pcdm
        _check(p.K >= 1, "pcdm.K", "must be at least 1")
        _check(p.N >= 1, "pcdm.N", "must be at least 1")
        _check(p.H >= 1, "pcdm.H", "must be at least 1")
        _check(0.0 < p.t_b <= p.T, "pcdm.t_b", "need 0 < t_b <= T")
        for key in ("t_b", "T"):
            steps = getattr(p, key) / self.dt
            _check(abs(steps - round(steps)) < 1e-9, f"pcdm.{key}", "must be a whole number of steps")
        _check(0.0 <= self.train.dropout <= 1.0, "train.dropout", "must be in [0, 1]")
        _check(0.0 <= self.data.perturbed <= 1.0, "data.perturbed", "must be in [0, 1]")
        _check(self.data.variants >= 1, "data.variants", "must be positive")
        try:
            build_vp_schedule(p.H, self.schedule.beta_min, self.schedule.beta_max, self.schedule.reference_steps)
            self.planner_config()
        except (ConfigurationError, ValueError) as exc:
            raise ConfigurationError(f"invalid configuration: {exc}") from None

    @property
    def split(self) -> BranchSplit:
        return BranchSplit(int(round(self.pcdm.t_b / self.dt)), int(round(self.pcdm.T / self.dt)))

    def schedule_params(self) -> dict:
        return {"H": self.pcdm.H, **dataclasses.asdict(self.schedule)}

    def pcdm_config(self) -> PcdmConfig:
        p = self.pcdm
        return PcdmConfig(p.K, p.N, p.H, self.split, p.deterministic)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(self.pcdm_config(), self.dt, self.planner.replan_period, self.planner.emergency_decel,
                             score=self.score)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        values = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        if seed is not None:
            values["seed"] = int(seed)
        return TrainConfig(**values)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigurationError(f"config key '{path}': {message}")


def _coerce(value, annotation: str, path: str):
    ann = annotation.replace(" ", "")
    if ann.endswith("|None"):
        if value is None:
            return None
        ann = ann[: -len("|None")]
    if ann == "bool":
        _check(isinstance(value, bool), path, f"expected true/false, got {value!r}")
        return value
    if ann == "int":
        _check(isinstance(value, int) and not isinstance(value, bool), path, f"expected an integer, got {value!r}")
        return value
    if ann == "float":
        _check(isinstance(value, (int, float)) and not isinstance(value, bool), path,
               f"expected a number, got {value!r}")
        _check(math.isfinite(value), path, "must be finite")
        return float(value)
    if ann == "str":
        _check(isinstance(value, str), path, f"expected a string, got {value!r}")
        return value
    if ann == "tuple":
        if isinstance(value, (str, int)):
            value = [value]
        _check(isinstance(value, list), path, f"expected a list, got {value!r}")
        return tuple(value)
    raise ConfigurationError(f"config key '{path}': unsupported type {annotation}")


def _build(cls, doc, path: str):
    prefix = f"{path}." if path else ""
    _check(isinstance(doc, dict), path or "<root>", f"expected a mapping, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config key '{prefix}{unknown[0]}'; allowed: {sorted(known)}")
    values = {}
    for name, value in doc.items():
        f = known[name]
        sub = _SECTIONS.get(f.type if isinstance(f.type, str) else f.type.__name__)
        if sub is not None:
            values[name] = _build(sub, value, prefix + name)
        else:
            values[name] = _coerce(value, f.type if isinstance(f.type, str) else f.type.__name__, prefix + name)
    try:
        return cls(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"config section '{path or '<root>'}': {exc}") from None


_SECTIONS = {
    "ScheduleSection": ScheduleSection, "PcdmSection": PcdmSection, "PlannerSection": PlannerSection,
    "ScoreConfig": ScoreConfig, "DataSection": DataSection, "TrainSection": TrainSection,
    "CheckpointSection": CheckpointSection,
}


def config_from_dict(doc: dict | None) -> RunConfig:
    return _build(RunConfig, doc or {}, "")


def load_config(path=None) -> RunConfig:
    """Parse a YAML file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(doc)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def packaged_checkpoint(role: str):
    return resources.files("branchplan") / "data" / "models" / f"{role}.npz"
