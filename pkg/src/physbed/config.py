"""JSON run configuration with dotted ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .baselines import BaselineConfig
from .data import ObservationConfig, SynthParams
from .errors import ParameterError
from .evaluation import SplitSpec
from .physics import LossConfig, Schedule
from .solve import SolverConfig, TileConfig

OUTPUT_ENV = "PHYSBED_OUTPUT_DIR"

# file names inside a scene directory
SCENE_FILES = {
    "s": "surface.asc",
    "vx": "vx.asc",
    "vy": "vy.asc",
    "smb": "smb.asc",
    "dhdt": "dhdt.asc",
    "b_p": "prior_bed.asc",
}
PICKS_FILE = "picks.csv"
TRUTH_FILE = "truth_bed.asc"


@dataclass(frozen=True)
class Paths:
    scene_dir: Optional[str] = None
    picks: Optional[str] = None
    output_dir: Optional[str] = None


@dataclass(frozen=True)
class SynthConfig:
    height: int = 256
    width: int = 256
    spacing: float = 150.0
    params: SynthParams = SynthParams()


@dataclass(frozen=True)
class ScheduleConfig:
    """Ramp fractions; the epoch count comes from the solver settings."""

    phys_ramp_end: float = 0.9
    prior_ramp_start: float = 0.3
    prior_ramp_end: float = 0.9

    def build(self, total_epochs: int) -> Schedule:
        return Schedule(max(1, total_epochs), self.phys_ramp_end, self.prior_ramp_start,
                        self.prior_ramp_end)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    mode: str = "whole-grid"
    tta: bool = False
    paths: Paths = Paths()
    synth: SynthConfig = SynthConfig()
    split: SplitSpec = SplitSpec()
    observation: ObservationConfig = ObservationConfig()
    loss: LossConfig = LossConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    solver: SolverConfig = SolverConfig()
    tiles: TileConfig = TileConfig()
    baseline: BaselineConfig = BaselineConfig()

    def __post_init__(self):
        if self.mode not in ("whole-grid", "tiled"):
            raise ParameterError(f"mode must be 'whole-grid' or 'tiled', got {self.mode!r}")
        self.schedule.build(self.solver.max_epochs)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_plain(cls, d, "")

    def output_dir(self) -> str:
        return self.paths.output_dir or os.environ.get(OUTPUT_ENV) or "physbed_out"


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, d, prefix):
    if not isinstance(d, dict):
        raise ParameterError(f"config section '{prefix or 'root'}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in known:
            raise ParameterError(f"unknown config key '{prefix}{key}'")
        default = getattr(cls(), key) if _has_defaults(cls) else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_plain(type(default), value, f"{prefix}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ParameterError(f"bad config section '{prefix or 'root'}': {exc}") from None


def _has_defaults(cls) -> bool:
    return all(f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
               for f in dataclasses.fields(cls))


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, lists, null), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Set dotted keys, e.g. ``solver.lr=0.005``, in a nested dict (copied)."""
    out = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ParameterError(f"override '{item}' is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ParameterError(f"unknown config key '{key}'")
            node = node[p]
        if parts[-1] not in node:
            raise ParameterError(f"unknown config key '{key}'")
        node[parts[-1]] = parse_value(text)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the JSON file (if any), then ``--set`` overrides."""
    base = RunConfig().to_dict()
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        base = _merge(base, user, "")
    return RunConfig.from_dict(apply_overrides(base, overrides))


def _merge(base: dict, user: dict, prefix: str) -> dict:
    out = dict(base)
    for k, v in user.items():
        if k not in base:
            raise ParameterError(f"unknown config key '{prefix}{k}'")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out
