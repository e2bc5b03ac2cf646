"""Run configuration: one TOML file holds every tunable.

Sections map onto the parameter dataclasses ([mppi], [costs], [track],
[channel], [race]); the costs section carries the published constants
(alpha 250, beta 100000, r1 1.0, r2 2.0, the +-5000 passing terms, the
10000 trailing-collision penalty, the 0.9 crash decay) alongside the
invented weights, so the whole cost design is auditable in one place.
``to_toml`` writes an effective config that parses back to identical
values.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .comms import ChannelParams
from .costs import CostParams, ObstacleCostParams, RacingCostParams, RunningCostParams
from .errors import ConfigError
from .mppi import MppiParams
from .track import TrackMap, stadium_oval


@dataclass(frozen=True)
class TrackConfig:
    kind: str = "oval"            # "oval" | "file"
    file: str = ""
    straight: float = 30.0
    radius: float = 10.0
    half_width: float = 1.5

    def build(self, base_dir: Optional[Path] = None) -> TrackMap:
        if self.kind == "oval":
            return stadium_oval(straight=self.straight, radius=self.radius,
                                half_width=self.half_width)
        if self.kind == "file":
            path = Path(self.file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"track file not found: {path}")
            return TrackMap.load(path)
        raise ConfigError(f"unknown track kind {self.kind!r}")


@dataclass(frozen=True)
class VehicleConfig:
    role: str = "autonomous"      # autonomous | human | scripted
    start_progress: float = 0.0   # arc fraction of the start position
    start_offset: float = 0.0     # m left of the centerline
    start_speed: float = 2.0      # m/s rolling start
    scripted_speed: float = 3.6   # m/s target for the scripted follower

    def __post_init__(self):
        if self.role not in ("autonomous", "human", "scripted"):
            raise ConfigError(f"unknown vehicle role {self.role!r}")


@dataclass(frozen=True)
class RaceConfig:
    dt: float = 0.005             # s physics step
    replan_every: int = 5         # physics steps per replan boundary
    duration: float = 60.0        # s simulated
    seed: int = 0
    lap_target: int = 0           # stop after this many ego laps; 0 = never
    collision_terminates: bool = False
    vehicles: tuple[VehicleConfig, ...] = (
        VehicleConfig(role="autonomous", start_progress=0.0),
        VehicleConfig(role="human", start_progress=0.05),
    )

    def __post_init__(self):
        if self.dt <= 0 or self.replan_every < 1:
            raise ConfigError("need dt > 0 and replan_every >= 1")
        if self.duration < 0:
            raise ConfigError("duration must be >= 0")
        if not self.vehicles:
            raise ConfigError("at least one vehicle is required")
        humans = sum(1 for v in self.vehicles if v.role == "human")
        if humans > 1:
            raise ConfigError("at most one human vehicle per race")


@dataclass(frozen=True)
class RunConfig:
    mppi: MppiParams = field(default_factory=MppiParams)
    costs: CostParams = field(default_factory=CostParams)
    track: TrackConfig = field(default_factory=TrackConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    race: RaceConfig = field(default_factory=RaceConfig)

    @property
    def replan_dt(self) -> float:
        return self.race.dt * self.race.replan_every


_COSTS_SPLIT = {
    "running": ("w_track", "w_speed", "w_crash", "w_slip", "v_desired",
                "crash_decay", "roll_crash_threshold"),
    "obstacle": ("r1", "r2", "alpha", "beta"),
    "racing": ("pass_reward", "overtaken_penalty", "trail_collision_penalty",
               "collision_radius"),
}


def _build(cls, section: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(
            f"[{name}] has unknown key(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _build_costs(section: dict) -> CostParams:
    known = {k for keys in _COSTS_SPLIT.values() for k in keys}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(
            f"[costs] has unknown key(s): {', '.join(sorted(unknown))}")
    parts = {}
    for group, keys in _COSTS_SPLIT.items():
        sub = {k: section[k] for k in keys if k in section}
        cls = {"running": RunningCostParams, "obstacle": ObstacleCostParams,
               "racing": RacingCostParams}[group]
        try:
            parts[group] = cls(**sub)
        except ValueError as exc:
            raise ConfigError(f"[costs]: {exc}") from exc
    return CostParams(**parts)


def loads(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc
    known = {"mppi", "costs", "track", "channel", "race"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    race_sec = dict(doc.get("race", {}))
    vehicles = race_sec.pop("vehicles", None)
    if vehicles is not None:
        race_sec["vehicles"] = tuple(
            _build(VehicleConfig, v, "race.vehicles") for v in vehicles)
    return RunConfig(
        mppi=_build(MppiParams, doc.get("mppi", {}), "mppi"),
        costs=_build_costs(doc.get("costs", {})),
        track=_build(TrackConfig, doc.get("track", {}), "track"),
        channel=_build(ChannelParams, doc.get("channel", {}), "channel"),
        race=_build(RaceConfig, race_sec, "race"),
    )


def load(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def _emit_fields(obj, skip=()) -> list[str]:
    lines = []
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        if v is None:
            continue
        lines.append(f"{f.name} = {_toml_value(v)}")
    return lines


def to_toml(cfg: RunConfig) -> str:
    lines = ["[mppi]"]
    lines += _emit_fields(cfg.mppi)
    lines += ["", "[costs]"]
    for group in ("obstacle", "running", "racing"):
        lines += _emit_fields(getattr(cfg.costs, group))
    lines += ["", "[track]"]
    lines += _emit_fields(cfg.track)
    lines += ["", "[channel]"]
    lines += _emit_fields(cfg.channel)
    lines += ["", "[race]"]
    lines += _emit_fields(cfg.race, skip=("vehicles",))
    for v in cfg.race.vehicles:
        lines += ["", "[[race.vehicles]]"]
        lines += _emit_fields(v)
    return "\n".join(lines) + "\n"


def save(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(to_toml(cfg))
