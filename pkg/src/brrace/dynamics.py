"""Vehicle state, learned dynamics models, and trajectory rollout.

Two model families share one prediction contract, mapping
(v_x, v_y, yaw_rate, roll, steering, throttle) to the derivative
(dv_x, dv_y, dyaw_rate, droll):

* ``BasisModel`` — a linear combination of 25 fixed nonlinear features
  (see :func:`eval_basis`), fit in closed form by least squares.
* ``NeuralNetModel`` — two tanh hidden layers and a linear output.

Position and heading are never learned: ``step`` advances (x, y, yaw)
from the body-frame velocities and integrates the learned derivative by
explicit Euler, subdividing so no Euler slice exceeds ``MAX_SUBSTEP``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import _kernels as K
from ._kernels import (
    BASIS_COUNT,
    HALF_LENGTH_FRONT,
    HALF_LENGTH_REAR,
    MAX_STEER_RAD,
    MAX_SUBSTEP,
    OUTPUT_DIM,
    SLIP_SAT_GAIN,
    STATE_DIM,
    STATE_FIELDS,
    TAN_CLIP,
    VY_CAP,
    V_FLOOR,
)
from .errors import DynamicsBlowupError, SingularFitError

SYSID_COLUMNS = ("v_x", "v_y", "yaw_rate", "roll", "steering", "throttle",
                 "dvx", "dvy", "dyaw_rate", "droll")

_EMPTY_MAT = np.zeros((1, 1))
_EMPTY_VEC = np.zeros(1)


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@dataclass(frozen=True)
class VehicleState:
    """Full pose/velocity state of one vehicle (world x/y/yaw, body v_x/v_y)."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    yaw_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.roll,
                         self.v_x, self.v_y, self.yaw_rate])

    @staticmethod
    def from_array(a: np.ndarray) -> "VehicleState":
        return VehicleState(x=float(a[K.IX]), y=float(a[K.IY]),
                            yaw=float(a[K.IYAW]), roll=float(a[K.IROLL]),
                            v_x=float(a[K.IVX]), v_y=float(a[K.IVY]),
                            yaw_rate=float(a[K.IWZ]))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_array())


@dataclass(frozen=True)
class ControlInput:
    """Normalized actuator command; both channels live in [-1, 1]."""

    steering: float = 0.0
    throttle: float = 0.0

    def clamped(self) -> "ControlInput":
        return ControlInput(min(1.0, max(-1.0, self.steering)),
                            min(1.0, max(-1.0, self.throttle)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steering, self.throttle])


@dataclass(frozen=True)
class BasisModel:
    """Linear-in-features dynamics model; theta is (25, 4)."""

    theta: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.theta, dtype=float))
        if t.shape != (BASIS_COUNT, OUTPUT_DIM):
            raise ValueError(
                f"theta must be {(BASIS_COUNT, OUTPUT_DIM)}, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("theta contains non-finite entries")
        t.flags.writeable = False
        object.__setattr__(self, "theta", t)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(
            {"basis_version": 1, "theta": self.theta.tolist()}, indent=1))

    @staticmethod
    def load(path: Union[str, Path]) -> "BasisModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("basis_version") != 1:
            raise ValueError(f"unsupported basis_version {doc.get('basis_version')!r}")
        return BasisModel(np.array(doc["theta"], dtype=float))


@dataclass(frozen=True)
class NeuralNetModel:
    """Two tanh hidden layers and a linear head, input dim 6, output dim 4."""

    layer1_weights: np.ndarray
    layer1_bias: np.ndarray
    layer2_weights: np.ndarray
    layer2_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("layer1_weights", "layer1_bias", "layer2_weights",
                     "layer2_bias", "output_weights", "output_bias"):
            a = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")
            a.flags.writeable = False
            arrays[name] = a
            object.__setattr__(self, name, a)
        h1, nin = arrays["layer1_weights"].shape
        if nin != 6:
            raise ValueError(f"layer1_weights must have 6 input columns, got {nin}")
        if arrays["layer1_bias"].shape != (h1,):
            raise ValueError("layer1_bias does not match layer1_weights")
        h2, h1b = arrays["layer2_weights"].shape
        if h1b != h1:
            raise ValueError("layer2_weights does not chain from layer 1")
        if arrays["layer2_bias"].shape != (h2,):
            raise ValueError("layer2_bias does not match layer2_weights")
        nout, h2b = arrays["output_weights"].shape
        if h2b != h2 or nout != OUTPUT_DIM:
            raise ValueError("output_weights does not chain to a 4-dim output")
        if arrays["output_bias"].shape != (OUTPUT_DIM,):
            raise ValueError("output_bias must have 4 entries")

    @staticmethod
    def random(hidden: tuple[int, int] = (32, 32), seed: int = 0,
               scale: float = 0.5) -> "NeuralNetModel":
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        return NeuralNetModel(
            layer1_weights=rng.normal(0.0, scale / math.sqrt(6), (h1, 6)),
            layer1_bias=np.zeros(h1),
            layer2_weights=rng.normal(0.0, scale / math.sqrt(h1), (h2, h1)),
            layer2_bias=np.zeros(h2),
            output_weights=rng.normal(0.0, scale / math.sqrt(h2), (OUTPUT_DIM, h2)),
            output_bias=np.zeros(OUTPUT_DIM),
        )

    def save(self, path: Union[str, Path]) -> None:
        doc = {"nn_version": 1, "arrays": {}, "shapes": {}}
        for name in ("layer1_weights", "layer1_bias", "layer2_weights",
                     "layer2_bias", "output_weights", "output_bias"):
            a = getattr(self, name)
            doc["arrays"][name] = a.tolist()
            doc["shapes"][name] = list(a.shape)
        Path(path).write_text(json.dumps(doc))

    @staticmethod
    def load(path: Union[str, Path]) -> "NeuralNetModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("nn_version") != 1:
            raise ValueError(f"unsupported nn_version {doc.get('nn_version')!r}")
        kwargs = {}
        for name, shape in doc["shapes"].items():
            a = np.array(doc["arrays"][name], dtype=float)
            if list(a.shape) != list(shape):
                raise ValueError(
                    f"{name}: declared shape {shape} but data is {list(a.shape)}")
            kwargs[name] = a
        return NeuralNetModel(**kwargs)


DynamicsModel = Union[BasisModel, NeuralNetModel]


def _kernel_args(model: DynamicsModel):
    if isinstance(model, BasisModel):
        return (K.MODEL_BASIS, model.theta, _EMPTY_MAT, _EMPTY_VEC,
                _EMPTY_MAT, _EMPTY_VEC, _EMPTY_MAT, _EMPTY_VEC)
    if isinstance(model, NeuralNetModel):
        return (K.MODEL_NN, _EMPTY_MAT,
                model.layer1_weights, model.layer1_bias,
                model.layer2_weights, model.layer2_bias,
                model.output_weights, model.output_bias)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def eval_basis(state: VehicleState, control: ControlInput) -> np.ndarray:
    """The fixed 25-element nonlinear feature vector.

    With a = b = 0.45 m, d_max = 0.35 rad, floor f = max(|v_x|, 0.3),
    slip angles af = atan2(v_y + a*yaw_rate, f) - d_max*steering and
    ar = atan2(v_y - b*yaw_rate, f), the features are, in order:

     0  1                    13 atan(5*af)
     1  v_x                  14 atan(5*ar)
     2  v_y                  15 v_x*yaw_rate
     3  yaw_rate             16 v_y*yaw_rate
     4  roll                 17 v_x*steering
     5  throttle             18 throttle^2
     6  steering             19 throttle^3
     7  sin(steering)        20 throttle*v_x
     8  cos(steering)        21 roll*v_x
     9  af                   22 v_y/f
    10  ar                   23 sign(v_y)*min(|v_y|, 1.0)
    11  tan(clip(af, 1.3))   24 v_x*|v_x|
    12  tan(clip(ar, 1.3))

    The tan features clip their argument to +-1.3 rad to stay off the
    tangent pole; the list and all constants are frozen, since persisted
    theta matrices are only meaningful against this exact basis.
    """
    if not state.is_finite():
        raise ValueError("eval_basis requires a finite state")
    if not (math.isfinite(control.steering) and math.isfinite(control.throttle)):
        raise ValueError("eval_basis requires a finite control")
    out = np.empty(BASIS_COUNT)
    inp = np.array([[state.v_x, state.v_y, state.yaw_rate, state.roll,
                     control.steering, control.throttle]])
    K.batch_basis_features(inp, out.reshape(1, -1))
    return out


def basis_predict(model: BasisModel, state: VehicleState,
                  control: ControlInput) -> np.ndarray:
    """theta^T phi(state, control); linear in theta."""
    return np.asarray(K.model_derivative(
        *_kernel_args(model), state.v_x, state.v_y, state.yaw_rate,
        state.roll, control.steering, control.throttle))


def nn_predict(model: NeuralNetModel, state: VehicleState,
               control: ControlInput) -> np.ndarray:
    """Forward pass W3 tanh(W2 tanh(W1 z + b1) + b2) + b3."""
    return np.asarray(K.model_derivative(
        *_kernel_args(model), state.v_x, state.v_y, state.yaw_rate,
        state.roll, control.steering, control.throttle))


def predict(model: DynamicsModel, state: VehicleState,
            control: ControlInput) -> np.ndarray:
    return np.asarray(K.model_derivative(
        *_kernel_args(model), state.v_x, state.v_y, state.yaw_rate,
        state.roll, control.steering, control.throttle))


def nn_jacobian(model: NeuralNetModel, z: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of the network output w.r.t. its 6-dim input."""
    z = np.asarray(z, dtype=float)
    a1 = model.layer1_weights @ z + model.layer1_bias
    h1 = np.tanh(a1)
    a2 = model.layer2_weights @ h1 + model.layer2_bias
    h2 = np.tanh(a2)
    d2 = (1.0 - h2 * h2)[:, None] * model.layer2_weights
    d1 = (1.0 - h1 * h1)[:, None] * model.layer1_weights
    return model.output_weights @ d2 @ d1


def fit_basis(dataset: Sequence[tuple[VehicleState, ControlInput, np.ndarray]]
              ) -> BasisModel:
    """Closed-form least-squares fit of theta over observed derivatives.

    Raises SingularFitError when the design matrix is rank deficient;
    there is deliberately no pseudo-inverse fallback.
    """
    inputs = np.array([[s.v_x, s.v_y, s.yaw_rate, s.roll,
                        c.steering, c.throttle] for s, c, _ in dataset])
    targets = np.array([np.asarray(d, dtype=float) for _, _, d in dataset])
    return fit_basis_arrays(inputs, targets)


def fit_basis_arrays(inputs: np.ndarray, targets: np.ndarray) -> BasisModel:
    """Array form of :func:`fit_basis`: inputs (n, 6), targets (n, 4)."""
    inputs = np.ascontiguousarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = inputs.shape[0]
    if n < BASIS_COUNT:
        raise SingularFitError(
            f"need at least {BASIS_COUNT} samples, got {n}")
    if targets.shape != (n, OUTPUT_DIM):
        raise ValueError(f"targets must be ({n}, {OUTPUT_DIM})")
    phi = np.empty((n, BASIS_COUNT))
    K.batch_basis_features(inputs, phi)
    theta, _, rank, svals = np.linalg.lstsq(phi, targets, rcond=None)
    if rank < BASIS_COUNT:
        cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else math.inf
        raise SingularFitError(
            f"design matrix rank {rank} < {BASIS_COUNT} (condition {cond:.3e}); "
            "the sampled states do not excite every basis direction")
    return BasisModel(theta)


def fit_residual_rms(model: DynamicsModel, inputs: np.ndarray,
                     targets: np.ndarray) -> np.ndarray:
    """Per-output-channel RMS prediction residual over a dataset."""
    inputs = np.ascontiguousarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    preds = np.empty_like(targets)
    args = _kernel_args(model)
    for i in range(inputs.shape[0]):
        preds[i] = K.model_derivative(*args, inputs[i, 0], inputs[i, 1],
                                      inputs[i, 2], inputs[i, 3],
                                      inputs[i, 4], inputs[i, 5])
    return np.sqrt(np.mean((preds - targets) ** 2, axis=0))


def step(model: DynamicsModel, state: VehicleState, control: ControlInput,
         dt: float, max_substep: float = MAX_SUBSTEP) -> VehicleState:
    """Advance one control interval.

    (x, y) integrate the body velocity rotated into the world frame, yaw
    integrates yaw_rate and is re-wrapped to (-pi, pi]; the velocity
    block follows the model derivative. The interval is subdivided so no
    Euler slice exceeds ``max_substep``.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    traj = rollout(model, state, np.array([[control.steering, control.throttle]]),
                   dt, max_substep)
    return VehicleState.from_array(traj[1])


def rollout(model: DynamicsModel, start: VehicleState,
            controls: np.ndarray, dt: float,
            max_substep: float = MAX_SUBSTEP) -> np.ndarray:
    """Open-loop trajectory; returns (T+1, 7) states with row 0 = start."""
    controls = np.ascontiguousarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != 2 or controls.shape[0] < 1:
        raise ValueError(f"controls must be (T>=1, 2), got {controls.shape}")
    if not start.is_finite():
        raise DynamicsBlowupError("input", 0)
    horizon = controls.shape[0]
    out = np.empty((1, horizon + 1, STATE_DIM))
    err = np.empty((1, 2), dtype=np.int64)
    K.batch_rollout(start.as_array().reshape(1, -1),
                    controls.reshape(1, horizon, 2), dt, max_substep,
                    *_kernel_args(model), out, err)
    if err[0, 0] >= 0:
        raise DynamicsBlowupError(STATE_FIELDS[err[0, 1]], int(err[0, 0]))
    return out[0]


def rollout_batch(model: DynamicsModel, starts: np.ndarray,
                  controls: np.ndarray, dt: float,
                  max_substep: float = MAX_SUBSTEP
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rollout of N sequences; returns (states, err).

    states is (N, T+1, 7); err is (N, 2) with (failing timestep, field
    index) or (-1, -1). Blown-up rows hold NaN from the failure onward —
    callers decide whether that is an error (single rollouts) or an
    infinite-cost sample (the planner).
    """
    starts = np.ascontiguousarray(starts, dtype=float)
    controls = np.ascontiguousarray(controls, dtype=float)
    n, horizon = controls.shape[0], controls.shape[1]
    out = np.empty((n, horizon + 1, STATE_DIM))
    err = np.empty((n, 2), dtype=np.int64)
    K.batch_rollout(starts, controls, dt, max_substep,
                    *_kernel_args(model), out, err)
    return out, err


# Reference plant used as the simulator's ground truth and as the default
# planning model: a stable hand-set bicycle model expressed in the basis.
# Columns are (dv_x, dv_y, dyaw_rate, droll). Tuned for a 0.9 m, ~22 kg
# platform with a 10 m/s top speed (steady state of 6*thr - 0.6*v_x).
_DEFAULT_THETA_ENTRIES = {
    (1, 0): -0.6,    # longitudinal drag
    (5, 0): 6.0,     # throttle gain
    (16, 0): 1.0,    # v_y*yaw_rate body-frame coupling
    (2, 1): -0.5,    # lateral damping
    (13, 1): -5.0,   # front tire force (saturated slip)
    (14, 1): -5.0,   # rear tire force
    (15, 1): -1.0,   # -v_x*yaw_rate body-frame coupling
    (3, 2): -2.0,    # yaw damping
    (13, 2): -33.0,  # front tire yaw torque
    (14, 2): 33.0,   # rear tire yaw torque
    (4, 3): -3.0,    # roll decay
    (15, 3): 0.05,   # roll response to lateral acceleration
}


def default_basis_model() -> BasisModel:
    theta = np.zeros((BASIS_COUNT, OUTPUT_DIM))
    for (i, j), v in _DEFAULT_THETA_ENTRIES.items():
        theta[i, j] = v
    return BasisModel(theta)


def load_sysid_csv(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    """Read a system-identification dataset; returns (inputs, targets)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(SYSID_COLUMNS):
            raise ValueError(
                f"expected header {','.join(SYSID_COLUMNS)} in {path}")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(SYSID_COLUMNS))
    return data[:, :6].copy(), data[:, 6:].copy()


def save_sysid_csv(path: Union[str, Path], inputs: np.ndarray,
                   targets: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SYSID_COLUMNS)
        for i in range(inputs.shape[0]):
            writer.writerow([repr(float(v))
                             for v in (*inputs[i], *targets[i])])
