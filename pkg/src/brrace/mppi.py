"""Sampling-based receding-horizon optimizer.

Each replan perturbs the nominal control sequence with K Gaussian noise
sequences, rolls every candidate through the dynamics model, scores them,
and moves the nominal sequence toward the exponentiated-cost weighted
average of the perturbations. The minimum cost is subtracted before
exponentiation so weights are invariant to constant cost shifts. The
averaged perturbation is smoothed by a Savitzky-Golay filter before being
applied, the result is clamped to the actuator box, and the sequence is
shifted one slot for the next cycle.

One sample (by default exactly one) is forced to zero noise so the
incumbent plan is always in the batch and can never be displaced by
strictly worse candidates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.signal import savgol_coeffs

from .dynamics import DynamicsModel, VehicleState, rollout_batch
from .errors import DegenerateBatchError


@dataclass(frozen=True)
class MppiParams:
    K: int = 1200              # sampled control sequences per replan
    T: int = 96                # horizon steps
    dt: float = 0.025          # s per horizon step
    sigma_steering: float = 0.3
    sigma_throttle: float = 0.2
    lam: float = 10.0          # temperature of the weighted average
    gamma: float = 10.0        # control-noise coupling weight
    sg_window: int = 9
    sg_order: int = 3
    zero_noise_fraction: Optional[float] = None  # None = exactly one sample

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be >= 1")
        if self.sigma_steering <= 0 or self.sigma_throttle <= 0:
            raise ValueError("sampling sigmas must be positive")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.sg_window % 2 != 1 or self.sg_order >= self.sg_window:
            raise ValueError("need odd sg_window and sg_order < sg_window")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def sigma(self) -> np.ndarray:
        return np.array([self.sigma_steering, self.sigma_throttle])

    @property
    def n_zero_noise(self) -> int:
        if self.K < 2:
            return 0
        if self.zero_noise_fraction is None:
            return 1
        return min(self.K - 1, max(1, round(self.zero_noise_fraction * self.K)))


@dataclass
class SampleBatch:
    perturbations: np.ndarray  # (K, T, 2)
    costs: np.ndarray          # (K,)


@dataclass(frozen=True)
class Diagnostics:
    seed: int
    min_cost: float
    mean_cost: float
    ess: float
    blown_samples: int
    elapsed_us: int

    def to_record(self) -> dict:
        return {"seed": self.seed, "min_cost": self.min_cost,
                "mean_cost": self.mean_cost, "ess": self.ess,
                "blown_samples": self.blown_samples,
                "elapsed_us": self.elapsed_us}


@dataclass(frozen=True)
class PlanResult:
    controls: np.ndarray       # updated sequence (T, 2), already clamped
    first_control: np.ndarray  # controls[0], to actuate now
    next_controls: np.ndarray  # shifted sequence for the next cycle
    diagnostics: Diagnostics


def zero_controls(T: int) -> np.ndarray:
    return np.zeros((T, 2))


def sample_perturbations(params: MppiParams, rng_seed) -> np.ndarray:
    """(K, T, 2) i.i.d. Gaussian draws; the first slots are zeroed."""
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal((params.K, params.T, 2))
    eps *= params.sigma
    eps[:params.n_zero_noise] = 0.0
    return eps


def control_coupling(controls: np.ndarray, perturbations: np.ndarray,
                     params: MppiParams) -> np.ndarray:
    """gamma * sum_t u_t^T Sigma^-1 eps_t for each sample."""
    inv_var = 1.0 / (params.sigma ** 2)
    scaled = controls * inv_var  # (T, 2)
    return params.gamma * np.einsum("tc,ktc->k", scaled, perturbations)


def sample_cost(state_cost: float, controls: np.ndarray,
                perturbation: np.ndarray, params: MppiParams) -> float:
    """Total cost of one sample: S plus the control-noise coupling term."""
    return float(state_cost
                 + control_coupling(controls, perturbation[None], params)[0])


def compute_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """Min-subtracted softmax over sample costs; NaN costs are excluded."""
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 1 or costs.size < 1:
        raise ValueError("costs must be a non-empty 1-D array")
    safe = np.where(np.isnan(costs), np.inf, costs)
    beta = np.min(safe)
    if not np.isfinite(beta):
        raise DegenerateBatchError(
            f"all {costs.size} sample costs are non-finite")
    w = np.exp(-(safe - beta) / lam)
    return w / np.sum(w)


def sg_smooth(sequence: np.ndarray, window: int, order: int) -> np.ndarray:
    """Savitzky-Golay smoothing with odd (point-symmetric) edge padding.

    Odd reflection extends constants and straight lines exactly, so
    polynomials up to degree 1 pass through everywhere and higher degrees
    up to ``order`` are preserved at interior points.
    """
    seq = np.asarray(sequence, dtype=float)
    if window % 2 != 1 or window < 3:
        raise ValueError("window must be an odd integer >= 3")
    if order >= window:
        raise ValueError("order must be < window")
    n = seq.shape[0]
    if window > n:
        raise ValueError(f"window {window} exceeds sequence length {n}")
    if seq.ndim == 1:
        return _sg_channel(seq, window, order)
    out = np.empty_like(seq)
    for c in range(seq.shape[1]):
        out[:, c] = _sg_channel(seq[:, c], window, order)
    return out


def _sg_channel(x: np.ndarray, window: int, order: int) -> np.ndarray:
    h = window // 2
    coeffs = savgol_coeffs(window, order)
    left = 2.0 * x[0] - x[1:h + 1][::-1]
    right = 2.0 * x[-1] - x[-2:-h - 2:-1]
    padded = np.concatenate([left, x, right])
    return np.convolve(padded, coeffs, mode="valid")


def update_controls(controls: np.ndarray, batch: SampleBatch,
                    params: MppiParams) -> np.ndarray:
    """U + SG-filtered weighted perturbation average, clamped to [-1, 1]."""
    weights = compute_weights(batch.costs, params.lam)
    avg = np.einsum("k,ktc->tc", weights, batch.perturbations)
    if params.sg_window <= params.T:
        avg = sg_smooth(avg, params.sg_window, params.sg_order)
    return np.clip(controls + avg, -1.0, 1.0)


def shift_receding(controls: np.ndarray) -> np.ndarray:
    """Drop the consumed first control; the freed tail slot is zeroed."""
    out = np.empty_like(controls)
    out[:-1] = controls[1:]
    out[-1] = 0.0
    return out


def mppi_plan(state: VehicleState, controls: np.ndarray,
              model: DynamicsModel,
              cost_evaluator: Callable[[np.ndarray], np.ndarray],
              params: MppiParams, seed: int) -> PlanResult:
    """One full replan (sample, roll out, weight, update, shift).

    ``cost_evaluator`` maps the (K, T+1, 7) rollout block to K state
    costs. Samples whose rollout blew up receive infinite cost; if every
    sample is non-finite a DegenerateBatchError surfaces with the batch
    statistics. Bit-reproducible for a fixed seed regardless of thread
    count.
    """
    t0 = time.perf_counter_ns()
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (params.T, 2):
        raise ValueError(f"controls must be ({params.T}, 2), got {controls.shape}")
    eps = sample_perturbations(params, seed)
    candidate = controls[None, :, :] + eps  # clamped inside the rollout kernel
    starts = np.broadcast_to(state.as_array(), (params.K, 7))
    states, err = rollout_batch(model, np.ascontiguousarray(starts),
                                candidate, params.dt)
    state_costs = np.asarray(cost_evaluator(states), dtype=float)
    blown = err[:, 0] >= 0
    if np.any(blown):
        state_costs = np.where(blown, np.inf, state_costs)
    costs = state_costs + control_coupling(controls, eps, params)
    batch = SampleBatch(perturbations=eps, costs=costs)
    weights = compute_weights(costs, params.lam)
    new_controls = update_controls(controls, batch, params)
    finite = np.isfinite(costs)
    diag = Diagnostics(
        seed=int(seed) if np.isscalar(seed) else -1,
        min_cost=float(np.min(costs[finite])),
        mean_cost=float(np.mean(costs[finite])),
        ess=float(1.0 / np.sum(weights ** 2)),
        blown_samples=int(np.count_nonzero(blown)),
        elapsed_us=(time.perf_counter_ns() - t0) // 1000,
    )
    return PlanResult(controls=new_controls,
                      first_control=new_controls[0].copy(),
                      next_controls=shift_receding(new_controls),
                      diagnostics=diag)
