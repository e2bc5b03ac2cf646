"""State-dependent costs: on-track field, obstacle shell, running cost,
and the racing pass/collision bookkeeping.

The obstacle shell has two radii: inside r1 counts as collision and costs
beta outright; between r1 and r2 the cost ramps quadratically with alpha;
beyond r2 it vanishes. Racing adds a one-shot reward for moving from
trailing to leading, the mirrored penalty for being overtaken, and a
collision penalty that applies only while trailing — a leading vehicle
that gets hit from behind is not the one punished.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from ._kernels import V_FLOOR
from .dynamics import VehicleState
from .track import TrackMap

SIGN_DEADBAND = 0.05  # m of longitudinal dead-band before the lead flips


@dataclass(frozen=True)
class ObstacleCostParams:
    r1: float = 1.0
    r2: float = 2.0
    alpha: float = 250.0
    beta: float = 100_000.0

    def __post_init__(self):
        if not 0 < self.r1 < self.r2:
            raise ValueError(f"need 0 < r1 < r2, got r1={self.r1}, r2={self.r2}")
        if not self.beta >= self.alpha:
            raise ValueError("beta must dominate alpha")


@dataclass(frozen=True)
class RunningCostParams:
    w_track: float = 100.0
    w_speed: float = 4.0
    w_crash: float = 10_000.0
    w_slip: float = 50.0
    v_desired: float = 6.0
    crash_decay: float = 0.9
    roll_crash_threshold: float = 0.8

    def __post_init__(self):
        for name in ("w_track", "w_speed", "w_crash", "w_slip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.v_desired <= 0:
            raise ValueError("v_desired must be positive")
        if not 0 < self.crash_decay <= 1:
            raise ValueError("crash_decay must be in (0, 1]")


@dataclass(frozen=True)
class RacingCostParams:
    pass_reward: float = -5000.0
    overtaken_penalty: float = 5000.0
    trail_collision_penalty: float = 10_000.0
    collision_radius: float = 1.0

    def __post_init__(self):
        disabled = (self.pass_reward == 0 and self.overtaken_penalty == 0
                    and self.trail_collision_penalty == 0)
        if not disabled and not (self.pass_reward < 0 < self.overtaken_penalty
                                 <= self.trail_collision_penalty):
            raise ValueError(
                "expected pass_reward < 0 < overtaken_penalty <= "
                "trail_collision_penalty")


def obstacle_cost(d: float, p: ObstacleCostParams) -> float:
    """Piecewise cost of being distance d from an obstacle center.

    Boundaries are assigned conservatively: d = r1 costs beta, d = r2
    costs 0 (both quadratic branches agree there).
    """
    return float(K.obstacle_cost_scalar(float(d), p.r1, p.r2, p.alpha, p.beta))


def crash_indicator(state: VehicleState, track: TrackMap,
                    roll_crash_threshold: float = 0.8) -> int:
    """1 when rolled past the threshold or more than a track width off."""
    if abs(state.roll) > roll_crash_threshold:
        return 1
    if track.lateral_offset(state.x, state.y) > 2.0 * track.half_width:
        return 1
    return 0


def running_cost(state: VehicleState, t: int, track: TrackMap,
                 p: RunningCostParams) -> float:
    """Per-step cost: track field, speed error, decayed crash, side slip."""
    if t < 0:
        raise ValueError("timestep index must be >= 0")
    e = track.lateral_offset(state.x, state.y)
    track_c = min(1.0, (e / track.half_width) ** 2)
    crashed = 1.0 if (abs(state.roll) > p.roll_crash_threshold
                      or e > 2.0 * track.half_width) else 0.0
    slip = state.v_y / max(abs(state.v_x), V_FLOOR)
    return (p.w_track * track_c
            + p.w_speed * (state.v_x - p.v_desired) ** 2
            + p.w_crash * p.crash_decay ** t * crashed
            + p.w_slip * slip * slip)


def relative_longitudinal(ego: VehicleState, opp_position) -> float:
    """Forward body-frame coordinate of the opponent; positive = ahead."""
    ox, oy = float(opp_position[0]), float(opp_position[1])
    return float(K._rel_longitudinal(ego.x, ego.y, ego.yaw, ox, oy))


def passing_cost(prev_sign: int, curr_rel: float, in_collision: bool,
                 p: RacingCostParams) -> tuple[float, int]:
    """One step of the pass/collision bookkeeping.

    The lead sign is +1 while the opponent is ahead (ego trailing), -1
    while behind; |curr_rel| inside the dead-band keeps the previous
    sign. A +1 -> -1 flip earns pass_reward, the reverse flip costs
    overtaken_penalty, and a collision is penalized only when the updated
    sign says ego is trailing.
    """
    sign = prev_sign
    if curr_rel > SIGN_DEADBAND:
        sign = 1
    elif curr_rel < -SIGN_DEADBAND:
        sign = -1
    cost = 0.0
    if prev_sign == 1 and sign == -1:
        cost += p.pass_reward
    elif prev_sign == -1 and sign == 1:
        cost += p.overtaken_penalty
    if in_collision and sign == 1:
        cost += p.trail_collision_penalty
    return cost, sign


@dataclass(frozen=True)
class CostParams:
    """Everything the trajectory cost needs besides geometry."""

    running: RunningCostParams = field(default_factory=RunningCostParams)
    obstacle: ObstacleCostParams = field(default_factory=ObstacleCostParams)
    racing: RacingCostParams = field(default_factory=RacingCostParams)


def trajectory_cost_batch(states: np.ndarray, opp_xy: Optional[np.ndarray],
                          track: TrackMap, params: CostParams) -> np.ndarray:
    """Summed cost of N trajectories (N, T+1, 7) against one opponent path.

    Row 0 of each trajectory is the current state and contributes no
    cost; the crash decay exponent starts at 0 on the first predicted
    state. Pass/collision bookkeeping threads the lead sign from the
    t = 0 states. Terminal cost is zero. NaN trajectories cost +inf.
    """
    states = np.ascontiguousarray(states, dtype=float)
    horizon_plus = states.shape[1]
    if opp_xy is None:
        has_opp = False
        opp = np.zeros((horizon_plus, 2))
    else:
        opp = np.ascontiguousarray(opp_xy, dtype=float)
        if opp.shape != (horizon_plus, 2):
            raise ValueError(
                f"opponent path must be ({horizon_plus}, 2), got {opp.shape}")
        has_opp = True
    r, o, g = params.running, params.obstacle, params.racing
    out = np.empty(states.shape[0])
    K.batch_trajectory_cost(
        states, opp, has_opp, *track.kernel_args(), track.half_width,
        r.w_track, r.w_speed, r.w_crash, r.w_slip, r.v_desired,
        r.crash_decay, r.roll_crash_threshold, V_FLOOR,
        o.alpha, o.beta, o.r1, o.r2,
        g.pass_reward, g.overtaken_penalty, g.trail_collision_penalty,
        g.collision_radius, SIGN_DEADBAND, out)
    return out


def trajectory_cost(trajectory: np.ndarray,
                    opponent_trajectory: Optional[np.ndarray],
                    track: TrackMap, params: CostParams) -> float:
    """Scalar S of one trajectory; see :func:`trajectory_cost_batch`."""
    trajectory = np.asarray(trajectory, dtype=float)
    if opponent_trajectory is not None:
        opp = np.asarray(opponent_trajectory, dtype=float)
        if opp.ndim == 2 and opp.shape[1] >= 2:
            opp = opp[:, :2]
        if opp.shape[0] != trajectory.shape[0]:
            raise ValueError(
                f"trajectories are not time-aligned: {trajectory.shape[0]} "
                f"ego states vs {opp.shape[0]} opponent states")
    else:
        opp = None
    return float(trajectory_cost_batch(
        trajectory[None, :, :], opp, track, params)[0])


class TrajectoryCostEvaluator:
    """Batch cost closure handed to the planner.

    Binds the track, the parameter set, and (optionally) the opponent's
    predicted path for the current replan cycle.
    """

    def __init__(self, track: TrackMap, params: CostParams,
                 opponent_xy: Optional[np.ndarray] = None):
        self.track = track
        self.params = params
        self.opponent_xy = opponent_xy

    def __call__(self, states: np.ndarray) -> np.ndarray:
        opp = self.opponent_xy
        if opp is not None and opp.shape[0] != states.shape[1]:
            raise ValueError(
                f"opponent path has {opp.shape[0]} states, trajectories "
                f"have {states.shape[1]}")
        return trajectory_cost_batch(states, opp, self.track, self.params)
