"""Two-vehicle autonomous-racing simulator and control library.

Set BRRACE_THREADS to cap the compiled kernels' worker threads; it must
take effect before numba is imported, hence the env shim below.
"""

import os as _os

if "BRRACE_THREADS" in _os.environ and "NUMBA_NUM_THREADS" not in _os.environ:
    _os.environ["NUMBA_NUM_THREADS"] = _os.environ["BRRACE_THREADS"]

from .comms import Channel, ChannelParams, Inbox, PoseMessage, decode_pose, downsample, encode_pose
from .config import RaceConfig, RunConfig, TrackConfig, VehicleConfig
from .costs import (CostParams, ObstacleCostParams, RacingCostParams,
                    RunningCostParams, obstacle_cost, passing_cost,
                    relative_longitudinal, running_cost, trajectory_cost)
from .dynamics import (BasisModel, ControlInput, NeuralNetModel, VehicleState,
                       basis_predict, default_basis_model, eval_basis,
                       fit_basis, nn_predict, rollout, step)
from .errors import BrraceError
from .games import (MatrixGame, OpponentPlan, RacerAgent, best_response_set,
                    br_dynamics, br_mppi_cycle, is_nash, predict_opponent)
from .mppi import MppiParams, PlanResult, compute_weights, mppi_plan, sg_smooth
from .sim import RaceOutcome, RaceWorld, run_race
from .track import TrackMap, progress, stadium_oval, track_cost

__version__ = "0.1.0"
