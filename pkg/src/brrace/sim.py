"""Closed-loop race world: fixed-step physics for every vehicle, replans
on a fixed boundary, the simulated pose channel between vehicles, and
event/lap/score bookkeeping with a JSONL trace.

Stepping is strictly deterministic: the clock is step_count * dt, every
random draw is seeded from the run seed, and replan noise is derived from
(seed, replan_index), so identical configs and input scripts reproduce
traces bit for bit. A ``replan_gate`` can veto individual replan
boundaries; the live gateway uses it to skip overrunning replans and
records the skips so replays take the same path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .comms import Channel, Inbox, PoseMessage, StreamDownsampler
from .config import RunConfig, VehicleConfig
from .costs import SIGN_DEADBAND, relative_longitudinal
from .dynamics import (ControlInput, DynamicsModel, VehicleState,
                       default_basis_model, step, wrap_angle)
from .errors import BrraceError, DynamicsBlowupError, EmptyInboxError, StaleOpponentError
from .games import OpponentPlan, RacerAgent, br_mppi_cycle, predict_opponent
from .mppi import shift_receding, zero_controls
from .track import TrackMap, progress as track_progress

TRACE_SCHEMA_VERSION = 1
DEAD_MAN_SECONDS = 0.3  # human input older than this decays to zero


def seed_for_replan(base_seed: int, replan_index: int) -> int:
    """Stable per-replan seed derivation."""
    ss = np.random.SeedSequence((base_seed, replan_index))
    return int(ss.generate_state(1)[0]) & 0x7FFF_FFFF_FFFF_FFFF


def start_state(track: TrackMap, cfg: VehicleConfig) -> VehicleState:
    """Place a vehicle at an arc fraction with a lateral offset, heading
    along the local track direction at its configured rolling speed."""
    s = (cfg.start_progress % 1.0) * track.total_length
    idx = int(np.searchsorted(track.cum_arc, s, side="right")) - 1
    idx = max(0, min(idx, len(track.vertices) - 1))
    frac = (s - track.cum_arc[idx]) / track.segment_lengths[idx]
    nxt = (idx + 1) % len(track.vertices)
    p = track.vertices[idx] + frac * (track.vertices[nxt] - track.vertices[idx])
    d = track.vertices[nxt] - track.vertices[idx]
    yaw = math.atan2(d[1], d[0])
    # +offset moves to the left of the driving direction
    left = np.array([-math.sin(yaw), math.cos(yaw)])
    pos = p + cfg.start_offset * left
    return VehicleState(x=float(pos[0]), y=float(pos[1]), yaw=yaw,
                        v_x=cfg.start_speed)


def centerline_autopilot(track: TrackMap, state: VehicleState,
                         target_speed: float) -> ControlInput:
    """Scripted follower: pure-pursuit steering plus proportional speed."""
    _, s = track.query(state.x, state.y)
    lookahead = max(1.5, 0.4 * max(state.v_x, 0.0) + 1.0)
    s_ahead = (float(s[0]) + lookahead) % track.total_length
    idx = int(np.searchsorted(track.cum_arc, s_ahead, side="right")) - 1
    idx = max(0, min(idx, len(track.vertices) - 1))
    target = track.vertices[idx]
    dx = target[0] - state.x
    dy = target[1] - state.y
    heading_err = wrap_angle(math.atan2(dy, dx) - state.yaw)
    steer = min(1.0, max(-1.0, 2.5 * heading_err))
    thr = min(1.0, max(-1.0, 0.1 * target_speed
                       + 0.6 * (target_speed - state.v_x)))
    return ControlInput(steer, thr)


@dataclass
class VehicleSlot:
    cfg: VehicleConfig
    state: VehicleState
    plan: Optional[np.ndarray]          # nominal control sequence (T, 2)
    applied: np.ndarray                 # control in effect this step
    downsampler: StreamDownsampler
    channel: Channel
    inbox: Inbox
    laps: int = 0
    progress: float = 0.0
    off_track: bool = False
    off_track_count: int = 0
    collision_count: int = 0
    pass_gains: int = 0
    pass_losses: int = 0
    speed_sum: float = 0.0
    speed_max: float = 0.0

    @property
    def autonomous(self) -> bool:
        return self.cfg.role == "autonomous"


@dataclass(frozen=True)
class RaceOutcome:
    duration: float
    steps: int
    laps: tuple[int, ...]
    pass_events: int
    collisions: int
    off_track_events: tuple[int, ...]
    mean_speed: tuple[float, ...]
    max_speed: tuple[float, ...]
    faulted: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "duration": self.duration, "steps": self.steps,
            "laps": list(self.laps), "pass_events": self.pass_events,
            "collisions": self.collisions,
            "off_track_events": list(self.off_track_events),
            "mean_speed": list(self.mean_speed),
            "max_speed": list(self.max_speed),
            "faulted": self.faulted,
        }


class RaceWorld:
    """Owns all mutable race state; stepped by exactly one thread."""

    def __init__(self, cfg: RunConfig, track: Optional[TrackMap] = None,
                 plant_model: Optional[DynamicsModel] = None,
                 planner_model: Optional[DynamicsModel] = None,
                 base_dir: Optional[Path] = None):
        self.cfg = cfg
        self.track = track if track is not None else cfg.track.build(base_dir)
        self.plant_model = plant_model or default_basis_model()
        self.planner_model = planner_model or self.plant_model
        self.clock = 0.0
        self.step_count = 0
        self.replan_index = 0
        self.faulted: Optional[str] = None
        self.events: list[dict] = []
        self._step_events: list[dict] = []
        self.overruns = 0
        self.last_plan_xy: Optional[np.ndarray] = None
        self._human_hold: Optional[tuple[float, np.ndarray]] = None
        self._last_opponent_pred: dict[int, np.ndarray] = {}
        self._pair_signs: dict[tuple[int, int], int] = {}
        self._in_collision: dict[tuple[int, int], bool] = {}
        self.vehicles: list[VehicleSlot] = []
        for i, vc in enumerate(cfg.race.vehicles):
            st = start_state(self.track, vc)
            chan_params = cfg.channel
            chan = Channel(type(chan_params)(
                broadcast_hz=chan_params.broadcast_hz,
                latency_mean=chan_params.latency_mean,
                latency_jitter=chan_params.latency_jitter,
                drop_prob=chan_params.drop_prob,
                rng_seed=chan_params.rng_seed + 7919 * i + cfg.race.seed))
            slot = VehicleSlot(
                cfg=vc, state=st,
                plan=zero_controls(cfg.mppi.T) if vc.role == "autonomous" else None,
                applied=np.zeros(2),
                downsampler=StreamDownsampler(chan_params.broadcast_hz,
                                              vehicle_id=i),
                channel=chan, inbox=Inbox())
            slot.progress = track_progress(self.track, st.x, st.y)
            self.vehicles.append(slot)
        # Prime the channel with each vehicle's initial pose so opponents
        # become visible after one latency, not one broadcast period.
        for slot in self.vehicles:
            for msg in slot.downsampler.push(0.0, slot.state):
                slot.channel.send(msg, 0.0)

    # -- per-step phases -------------------------------------------------

    def ingest_human(self, control: ControlInput, receipt_time: Optional[float] = None) -> None:
        c = control.clamped()
        t = self.clock if receipt_time is None else receipt_time
        self._human_hold = (t, np.array([c.steering, c.throttle]))

    def _deliver_v2v(self) -> None:
        for i, slot in enumerate(self.vehicles):
            for msg in slot.channel.poll(self.clock):
                for j, other in enumerate(self.vehicles):
                    if j != i:
                        other.inbox.deliver(msg)

    def _external_prediction(self, idx: int, ego: VehicleSlot
                             ) -> Optional[np.ndarray]:
        """Ego's view of an externally driven vehicle, via received poses."""
        try:
            pose, _age = ego.inbox.receive_latest(idx, self.clock)
            pred = predict_opponent(OpponentPlan(pose=pose), self.cfg.mppi.T,
                                    self.cfg.mppi.dt, now=self.clock)
            self._last_opponent_pred[idx] = pred
            return pred
        except StaleOpponentError:
            return self._last_opponent_pred.get(idx)
        except EmptyInboxError:
            return None

    def _replan(self) -> None:
        ego = next((v for v in self.vehicles if v.autonomous), None)
        if ego is None:
            return
        external: dict[int, np.ndarray] = {}
        agents = []
        for i, slot in enumerate(self.vehicles):
            if slot.autonomous:
                agents.append(RacerAgent(state=slot.state, controls=slot.plan,
                                         model=self.planner_model,
                                         cost_params=self.cfg.costs,
                                         autonomous=True))
            else:
                agents.append(RacerAgent(state=slot.state, controls=None,
                                         model=None, autonomous=False))
                pred = self._external_prediction(i, ego)
                if pred is not None:
                    external[i] = pred
        seed = seed_for_replan(self.cfg.race.seed, self.replan_index)
        outcomes = br_mppi_cycle(agents, self.track, self.cfg.mppi, seed,
                                 now=self.clock, external_predictions=external)
        for slot, outcome in zip(self.vehicles, outcomes):
            if not slot.autonomous:
                continue
            if outcome.error is not None:
                raise outcome.error
            slot.applied = outcome.plan.first_control
            slot.plan = outcome.plan.next_controls
            if slot is ego:
                self.last_plan_xy = outcome.predicted_xy

    def _skip_replan(self) -> None:
        """Overrun path: consume the incumbent plan without updating it."""
        self.overruns += 1
        for slot in self.vehicles:
            if slot.autonomous and slot.plan is not None:
                slot.applied = slot.plan[0].copy()
                slot.plan = shift_receding(slot.plan)

    def _controls(self) -> None:
        for slot in self.vehicles:
            if slot.cfg.role == "human":
                if (self._human_hold is None
                        or self.clock - self._human_hold[0] > DEAD_MAN_SECONDS):
                    slot.applied = np.zeros(2)
                else:
                    slot.applied = self._human_hold[1].copy()
            elif slot.cfg.role == "scripted":
                c = centerline_autopilot(self.track, slot.state,
                                         slot.cfg.scripted_speed)
                slot.applied = np.array([c.steering, c.throttle])

    def _integrate(self) -> None:
        dt = self.cfg.race.dt
        for i, slot in enumerate(self.vehicles):
            try:
                slot.state = step(self.plant_model, slot.state,
                                  ControlInput(*slot.applied), dt)
            except DynamicsBlowupError as exc:
                self.faulted = f"vehicle {i}: {exc}"
                raise

    def _broadcast(self) -> None:
        for slot in self.vehicles:
            for msg in slot.downsampler.push(self.clock, slot.state):
                slot.channel.send(msg, self.clock)

    def _event(self, kind: str, **data) -> None:
        ev = {"t": self.clock, "step": self.step_count, "type": kind, **data}
        self.events.append(ev)
        self._step_events.append(ev)

    def _update_score(self) -> None:
        hw = self.track.half_width
        r1 = self.cfg.costs.obstacle.r1
        for i, slot in enumerate(self.vehicles):
            prev_p = slot.progress
            e, s = self.track.query(slot.state.x, slot.state.y)
            p = float(s[0]) / self.track.total_length
            slot.progress = p if p < 1.0 else 0.0
            if prev_p > 0.9 and slot.progress < 0.1:
                slot.laps += 1
                self._event("lap", vehicle=i, laps=slot.laps)
            elif prev_p < 0.1 and slot.progress > 0.9:
                slot.laps -= 1
            off = bool(e[0] > hw)
            if off and not slot.off_track:
                slot.off_track_count += 1
                self._event("off_track", vehicle=i)
            slot.off_track = off
            slot.speed_sum += abs(slot.state.v_x)
            slot.speed_max = max(slot.speed_max, abs(slot.state.v_x))
        for i in range(len(self.vehicles)):
            for j in range(i + 1, len(self.vehicles)):
                a, b = self.vehicles[i], self.vehicles[j]
                d = math.hypot(a.state.x - b.state.x, a.state.y - b.state.y)
                colliding = d < r1
                if colliding and not self._in_collision.get((i, j), False):
                    a.collision_count += 1
                    b.collision_count += 1
                    self._event("collision", vehicles=[i, j], distance=d)
                self._in_collision[(i, j)] = colliding
                lon = relative_longitudinal(a.state,
                                            (b.state.x, b.state.y))
                sign = self._pair_signs.get((i, j), 0)
                new_sign = sign
                if lon > SIGN_DEADBAND:
                    new_sign = 1
                elif lon < -SIGN_DEADBAND:
                    new_sign = -1
                if sign == 1 and new_sign == -1:
                    a.pass_gains += 1
                    b.pass_losses += 1
                    self._event("pass", gained_lead=i, lost_lead=j)
                elif sign == -1 and new_sign == 1:
                    b.pass_gains += 1
                    a.pass_losses += 1
                    self._event("pass", gained_lead=j, lost_lead=i)
                self._pair_signs[(i, j)] = new_sign

    def world_step(self, human_input: Optional[ControlInput] = None,
                   replan_gate: Optional[Callable[[int], bool]] = None) -> None:
        """Advance one physics step; replans fire on their boundary.

        ``replan_gate(replan_index)`` returning False skips that replan
        (the incumbent plan keeps being consumed) — the live session uses
        this for budget overruns and replays use it to reproduce them.
        """
        if self.faulted:
            raise BrraceError(f"world is faulted: {self.faulted}")
        if human_input is not None:
            self.ingest_human(human_input)
        self._step_events = []
        self._deliver_v2v()
        if self.step_count % self.cfg.race.replan_every == 0:
            if replan_gate is None or replan_gate(self.replan_index):
                self._replan()
            else:
                self._skip_replan()
            self.replan_index += 1
        self._controls()
        self._integrate()
        self.step_count += 1
        self.clock = self.step_count * self.cfg.race.dt
        self._broadcast()
        self._update_score()

    def trace_row(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "t": self.clock,
            "step": self.step_count,
            "vehicles": [{
                "x": v.state.x, "y": v.state.y, "yaw": v.state.yaw,
                "roll": v.state.roll, "v_x": v.state.v_x, "v_y": v.state.v_y,
                "yaw_rate": v.state.yaw_rate,
                "steering": float(v.applied[0]),
                "throttle": float(v.applied[1]),
                "progress": v.progress, "laps": v.laps,
            } for v in self.vehicles],
            "events": self._step_events,
        }

    def outcome(self) -> RaceOutcome:
        n = max(1, self.step_count)
        return RaceOutcome(
            duration=self.clock, steps=self.step_count,
            laps=tuple(v.laps for v in self.vehicles),
            pass_events=sum(v.pass_gains for v in self.vehicles),
            collisions=len([e for e in self.events if e["type"] == "collision"]),
            off_track_events=tuple(v.off_track_count for v in self.vehicles),
            mean_speed=tuple(v.speed_sum / n for v in self.vehicles),
            max_speed=tuple(v.speed_max for v in self.vehicles),
            faulted=self.faulted,
        )


@dataclass(frozen=True)
class ScriptEntry:
    t: float
    steering: float
    throttle: float


def load_input_script(path: Union[str, Path]) -> list[ScriptEntry]:
    """Input script: JSONL rows {"t":, "steering":, "throttle":}."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        entries.append(ScriptEntry(t=float(row["t"]),
                                   steering=float(row["steering"]),
                                   throttle=float(row["throttle"])))
    entries.sort(key=lambda e: e.t)
    return entries


def run_race(cfg: RunConfig, input_script: Optional[Sequence[ScriptEntry]] = None,
             trace_path: Optional[Union[str, Path]] = None,
             diag_path: Optional[Union[str, Path]] = None,
             track: Optional[TrackMap] = None,
             plant_model: Optional[DynamicsModel] = None,
             planner_model: Optional[DynamicsModel] = None,
             replan_gate: Optional[Callable[[int], bool]] = None,
             ) -> tuple[RaceOutcome, RaceWorld]:
    """Step a world to its duration (or lap target / fault), tracing it.

    Script entries are human-vehicle inputs applied at their recorded sim
    times, which makes a recorded session and its replay take identical
    paths.
    """
    world = RaceWorld(cfg, track=track, plant_model=plant_model,
                      planner_model=planner_model)
    script = sorted(input_script, key=lambda e: e.t) if input_script else []
    script_pos = 0
    total_steps = int(round(cfg.race.duration / cfg.race.dt))
    trace_f = open(trace_path, "w") if trace_path else None
    try:
        for _ in range(total_steps):
            while (script_pos < len(script)
                   and script[script_pos].t <= world.clock + 1e-12):
                entry = script[script_pos]
                world.ingest_human(ControlInput(entry.steering, entry.throttle),
                                   receipt_time=entry.t)
                script_pos += 1
            try:
                world.world_step(replan_gate=replan_gate)
            except DynamicsBlowupError:
                break
            if trace_f:
                trace_f.write(json.dumps(world.trace_row()) + "\n")
            if (cfg.race.lap_target
                    and world.vehicles[0].laps >= cfg.race.lap_target):
                break
            if cfg.race.collision_terminates and any(
                    e["type"] == "collision" for e in world._step_events):
                break
    finally:
        if trace_f:
            trace_f.close()
    outcome = world.outcome()
    if diag_path:
        Path(diag_path).write_text(json.dumps(outcome.to_json(), indent=1))
    return outcome, world
