"""Game layer: matrix-game best response (used to sanity-check the
equilibrium machinery on enumerable games), opponent trajectory
prediction, and the coupled per-agent replanning sweep.

The sweep is Gauss-Seidel: agents replan in list order, each scoring its
samples against the *nominal noise-free* trajectories of all other
agents, and plans refreshed earlier in the same cycle are already visible
to later agents. Externally driven vehicles (a human, or a scripted
opponent) never replan; they enter the sweep only through their predicted
path, which is a constant-velocity extrapolation of their latest received
pose.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .comms import PoseMessage
from .costs import CostParams, TrajectoryCostEvaluator, trajectory_cost_batch
from .dynamics import DynamicsModel, VehicleState, rollout
from .errors import StaleOpponentError
from .mppi import MppiParams, PlanResult, mppi_plan
from .track import TrackMap

STALENESS_LIMIT = 0.5  # s before a received pose is unusable for prediction


# ---------------------------------------------------------------------------
# Toy matrix games


@dataclass(frozen=True)
class MatrixGame:
    """Two-player finite game; both matrices hold costs to be minimized.

    j1 is the row player's cost, j2 the column player's; both are (m, n).
    """

    j1: np.ndarray
    j2: np.ndarray

    def __post_init__(self):
        j1 = np.asarray(self.j1, dtype=float)
        j2 = np.asarray(self.j2, dtype=float)
        if j1.ndim != 2 or j1.shape != j2.shape:
            raise ValueError("j1 and j2 must be matrices of equal shape")
        if not (np.all(np.isfinite(j1)) and np.all(np.isfinite(j2))):
            raise ValueError("payoff entries must be finite")
        object.__setattr__(self, "j1", j1)
        object.__setattr__(self, "j2", j2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.j1.shape

    @staticmethod
    def load(path: Union[str, Path]) -> "MatrixGame":
        doc = json.loads(Path(path).read_text())
        return MatrixGame(np.array(doc["j1"]), np.array(doc["j2"]))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(
            {"j1": self.j1.tolist(), "j2": self.j2.tolist()}))


def best_response_set(game: MatrixGame, opponent_strategy_index: int,
                      player: int = 0) -> set[int]:
    """All cost-minimizing strategies against a fixed opponent choice.

    ``player`` 0 returns row indices against a column, 1 returns column
    indices against a row. Ties are all included.
    """
    if player == 0:
        col = game.j1[:, opponent_strategy_index]
        return set(np.flatnonzero(col == col.min()).tolist())
    if player == 1:
        row = game.j2[opponent_strategy_index, :]
        return set(np.flatnonzero(row == row.min()).tolist())
    raise ValueError("player must be 0 or 1")


def is_nash(game: MatrixGame, strategies: tuple[int, int]) -> bool:
    """True iff each strategy best-responds to the other (ties count)."""
    r, c = strategies
    return (r in best_response_set(game, c, player=0)
            and c in best_response_set(game, r, player=1))


class BrOutcome:
    """Trace and verdict of iterated best response."""

    def __init__(self, verdict: str, trace: list[tuple[int, int]],
                 fixed_point: Optional[tuple[int, int]] = None,
                 cycle: Optional[list[tuple[int, int]]] = None):
        self.verdict = verdict
        self.trace = trace
        self.fixed_point = fixed_point
        self.cycle = cycle

    @property
    def cycle_period(self) -> Optional[int]:
        return len(self.cycle) if self.cycle is not None else None

    def __repr__(self):
        return (f"BrOutcome({self.verdict}, fixed_point={self.fixed_point}, "
                f"period={self.cycle_period})")


def br_dynamics(game: MatrixGame, init: tuple[int, int],
                max_iters: Optional[int] = None,
                mode: str = "simultaneous") -> BrOutcome:
    """Iterate best responses from ``init`` until a fixed point or cycle.

    Ties break to the lowest index. "simultaneous" updates both players
    against the previous pair; "alternating" lets the column player react
    to the row player's fresh choice within the same iteration. The state
    space is finite, so one of the two verdicts is always reached; the
    max_iters guard only protects against a caller passing too small a
    bound.
    """
    if mode not in ("simultaneous", "alternating"):
        raise ValueError(f"unknown update mode {mode!r}")
    m, n = game.shape
    r, c = init
    if not (0 <= r < m and 0 <= c < n):
        raise ValueError(f"init {init} outside a {m}x{n} game")
    if max_iters is None:
        max_iters = m * n + 1
    trace = [(r, c)]
    seen = {(r, c): 0}
    for _ in range(max_iters):
        nr = int(np.argmin(game.j1[:, c]))
        nc = int(np.argmin(game.j2[r if mode == "simultaneous" else nr, :]))
        if (nr, nc) == (r, c):
            return BrOutcome("converged", trace, fixed_point=(r, c))
        r, c = nr, nc
        trace.append((r, c))
        if (r, c) in seen:
            start = seen[(r, c)]
            return BrOutcome("cycle", trace, cycle=trace[start:-1])
        seen[(r, c)] = len(trace) - 1
    raise ValueError(
        f"max_iters={max_iters} exhausted before revisiting a state; "
        f"any bound >= {m * n + 1} terminates")


# ---------------------------------------------------------------------------
# Opponent prediction


@dataclass(frozen=True)
class OpponentPlan:
    """Source material for predicting an opponent over the planning grid.

    Either a nominal plan (state + controls + model, rolled out without
    noise) or just the latest received pose (constant-velocity
    extrapolation). Exactly one source must be present.
    """

    state: Optional[VehicleState] = None
    controls: Optional[np.ndarray] = None
    model: Optional[DynamicsModel] = None
    pose: Optional[PoseMessage] = None

    def __post_init__(self):
        have_plan = self.controls is not None
        if have_plan and (self.state is None or self.model is None):
            raise ValueError("a nominal plan needs state, controls, and model")
        if have_plan == (self.pose is not None):
            raise ValueError("provide either a nominal plan or a pose, not both")


def predict_opponent(plan: OpponentPlan, T: int, dt: float,
                     now: Optional[float] = None,
                     staleness_limit: float = STALENESS_LIMIT) -> np.ndarray:
    """(T+1, 4) predicted opponent rows (x, y, world vx, world vy).

    Row 0 is the current estimate; rows align with the ego planning grid.
    Pose-based prediction extrapolates at the constant world velocity
    implied by the pose, advancing first by the pose age (now - t_sent)
    so the grid starts at "now". A pose older than ``staleness_limit``
    raises StaleOpponentError; callers keep their last good prediction.
    """
    if plan.controls is not None:
        traj = rollout(plan.model, plan.state, plan.controls[:T], dt)
        yaw = traj[:, 2]
        cy, sy = np.cos(yaw), np.sin(yaw)
        wx = traj[:, 4] * cy - traj[:, 5] * sy
        wy = traj[:, 4] * sy + traj[:, 5] * cy
        return np.column_stack([traj[:, 0], traj[:, 1], wx, wy])
    pose = plan.pose
    age = 0.0
    if now is not None:
        age = now - pose.t_sent
        if age > staleness_limit:
            raise StaleOpponentError(
                f"pose for vehicle {pose.vehicle_id} is {age:.3f}s old "
                f"(limit {staleness_limit}s)")
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    wx = pose.v_x * cy - pose.v_y * sy
    wy = pose.v_x * sy + pose.v_y * cy
    horizon_times = age + dt * np.arange(T + 1)
    return np.column_stack([
        pose.x + horizon_times * wx,
        pose.y + horizon_times * wy,
        np.full(T + 1, wx),
        np.full(T + 1, wy),
    ])


# ---------------------------------------------------------------------------
# Coupled replanning sweep


@dataclass
class RacerAgent:
    """One entry in the replanning sweep."""

    state: VehicleState
    controls: Optional[np.ndarray]          # nominal plan; None if external
    model: Optional[DynamicsModel]          # planning model; None if external
    cost_params: Optional[CostParams] = None
    autonomous: bool = True
    pose: Optional[PoseMessage] = None      # latest received pose (external)


@dataclass
class AgentOutcome:
    plan: Optional[PlanResult]
    predicted_xy: np.ndarray                # (T+1, 2) path others planned against
    error: Optional[Exception] = None


class _SummedOpponentEvaluator:
    """Running cost once, obstacle/racing terms summed over each opponent."""

    def __init__(self, track: TrackMap, params: CostParams,
                 opponent_paths: Sequence[np.ndarray]):
        self.track = track
        self.params = params
        self.paths = list(opponent_paths)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        first = self.paths[0] if self.paths else None
        total = trajectory_cost_batch(states, first, self.track, self.params)
        if len(self.paths) > 1:
            from dataclasses import replace
            bare = replace(self.params,
                           running=replace(self.params.running, w_track=0.0,
                                           w_speed=0.0, w_crash=0.0,
                                           w_slip=0.0))
            for extra in self.paths[1:]:
                total = total + trajectory_cost_batch(states, extra,
                                                      self.track, bare)
        return total


def br_mppi_cycle(agents: Sequence[RacerAgent], track: TrackMap,
                  params: MppiParams, seed: int,
                  now: Optional[float] = None,
                  external_predictions: Optional[dict] = None
                  ) -> list[AgentOutcome]:
    """One best-response sweep: each autonomous agent replans in order.

    Agent i draws its noise from seed + i, so a single-agent sweep is
    bit-identical to a solo ``mppi_plan`` with the same seed. Planner
    failures are captured per agent without aborting the rest of the
    sweep. ``external_predictions`` maps agent index to a precomputed
    (T+1, >=2) path for externally driven vehicles (the simulator owns
    staleness fallback); absent that, the agent's latest pose is
    extrapolated here.
    """
    preds: dict[int, np.ndarray] = {}
    for i, agent in enumerate(agents):
        if external_predictions and i in external_predictions:
            preds[i] = np.asarray(external_predictions[i], dtype=float)[:, :2]
        elif agent.autonomous:
            preds[i] = predict_opponent(
                OpponentPlan(state=agent.state, controls=agent.controls,
                             model=agent.model), params.T, params.dt)[:, :2]
        elif agent.pose is not None:
            preds[i] = predict_opponent(
                OpponentPlan(pose=agent.pose), params.T, params.dt,
                now=now)[:, :2]
        else:
            preds[i] = None

    outcomes: list[AgentOutcome] = []
    for i, agent in enumerate(agents):
        if not agent.autonomous:
            outcomes.append(AgentOutcome(plan=None, predicted_xy=preds[i]))
            continue
        opponent_paths = [preds[j] for j in range(len(agents))
                          if j != i and preds[j] is not None]
        cost_params = agent.cost_params or CostParams()
        if len(opponent_paths) <= 1:
            evaluator = TrajectoryCostEvaluator(
                track, cost_params,
                opponent_paths[0] if opponent_paths else None)
        else:
            evaluator = _SummedOpponentEvaluator(track, cost_params,
                                                 opponent_paths)
        try:
            result = mppi_plan(agent.state, agent.controls, agent.model,
                               evaluator, params, seed + i)
        except Exception as exc:  # isolate per-agent planner faults
            outcomes.append(AgentOutcome(plan=None, predicted_xy=preds[i],
                                         error=exc))
            continue
        # Later agents in this sweep see the freshly updated plan.
        preds[i] = predict_opponent(
            OpponentPlan(state=agent.state, controls=result.controls,
                         model=agent.model), params.T, params.dt)[:, :2]
        outcomes.append(AgentOutcome(plan=result, predicted_xy=preds[i]))
    return outcomes
