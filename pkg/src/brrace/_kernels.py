"""Compiled inner loops shared by the dynamics, cost, and planner modules.

Everything numeric-hot lives here exactly once: the public API in
``dynamics``, ``track``, and ``costs`` wraps these kernels for single
states, and the planner calls them on whole sample batches. Batch rows are
independent, so the parallel loops are bit-reproducible for any thread
count. The fastmath flags permit fma contraction and reassociation but
keep NaN/Inf semantics intact, since blow-up detection relies on them.

State vector layout (float64, length 7):
    0 x [m]   1 y [m]   2 yaw [rad]   3 roll [rad]
    4 v_x [m/s, body]   5 v_y [m/s, body]   6 yaw_rate [rad/s]
"""

import math

import numpy as np
from numba import njit, prange

IX, IY, IYAW, IROLL, IVX, IVY, IWZ = 0, 1, 2, 3, 4, 5, 6
STATE_DIM = 7
STATE_FIELDS = ("x", "y", "yaw", "roll", "v_x", "v_y", "yaw_rate")

BASIS_COUNT = 25
OUTPUT_DIM = 4  # d(v_x), d(v_y), d(yaw_rate), d(roll)

# Geometry and regularization constants of the basis feature set. The
# feature list itself is documented in dynamics.eval_basis; changing any
# of these invalidates every persisted basis model.
HALF_LENGTH_FRONT = 0.45  # m, CG to front axle
HALF_LENGTH_REAR = 0.45   # m, CG to rear axle
MAX_STEER_RAD = 0.35      # rad of road-wheel angle at steering = 1.0
V_FLOOR = 0.3             # m/s, lower clamp on |v_x| in denominators
SLIP_SAT_GAIN = 5.0       # gain inside the arctangent force saturation
TAN_CLIP = 1.3            # rad, keeps the tan features off the pole
VY_CAP = 1.0              # m/s, cap of the saturated lateral-speed feature

MAX_SUBSTEP = 0.01        # s, integrator subdivision ceiling

MODEL_BASIS = 0
MODEL_NN = 1

_NO_NAN = -1

_FASTMATH = {"contract", "reassoc", "arcp"}


@njit(cache=True, inline="always")
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@njit(cache=True, inline="always", fastmath=_FASTMATH)
def _features_core(vx, vy, wz, roll, steer, thr, sin_steer, cos_steer, out):
    vxr = abs(vx)
    if vxr < V_FLOOR:
        vxr = V_FLOOR
    alpha_f = math.atan2(vy + HALF_LENGTH_FRONT * wz, vxr) - MAX_STEER_RAD * steer
    alpha_r = math.atan2(vy - HALF_LENGTH_REAR * wz, vxr)
    af_c = alpha_f
    if af_c > TAN_CLIP:
        af_c = TAN_CLIP
    elif af_c < -TAN_CLIP:
        af_c = -TAN_CLIP
    ar_c = alpha_r
    if ar_c > TAN_CLIP:
        ar_c = TAN_CLIP
    elif ar_c < -TAN_CLIP:
        ar_c = -TAN_CLIP
    vy_sat = abs(vy)
    if vy_sat > VY_CAP:
        vy_sat = VY_CAP
    if vy < 0.0:
        vy_sat = -vy_sat

    out[0] = 1.0
    out[1] = vx
    out[2] = vy
    out[3] = wz
    out[4] = roll
    out[5] = thr
    out[6] = steer
    out[7] = sin_steer
    out[8] = cos_steer
    out[9] = alpha_f
    out[10] = alpha_r
    out[11] = math.tan(af_c)
    out[12] = math.tan(ar_c)
    out[13] = math.atan(SLIP_SAT_GAIN * alpha_f)
    out[14] = math.atan(SLIP_SAT_GAIN * alpha_r)
    out[15] = vx * wz
    out[16] = vy * wz
    out[17] = vx * steer
    out[18] = thr * thr
    out[19] = thr * thr * thr
    out[20] = thr * vx
    out[21] = roll * vx
    out[22] = vy / vxr
    out[23] = vy_sat
    out[24] = vx * abs(vx)


@njit(cache=True, fastmath=_FASTMATH)
def basis_features(vx, vy, wz, roll, steer, thr, out):
    """Fill ``out`` (length 25) with the fixed nonlinear feature set."""
    _features_core(vx, vy, wz, roll, steer, thr,
                   math.sin(steer), math.cos(steer), out)


@njit(cache=True, fastmath=_FASTMATH)
def batch_basis_features(inp, out):
    """Feature rows for (n, 6) inputs ordered v_x, v_y, yaw_rate, roll,
    steering, throttle."""
    for i in range(inp.shape[0]):
        basis_features(inp[i, 0], inp[i, 1], inp[i, 2], inp[i, 3],
                       inp[i, 4], inp[i, 5], out[i])


@njit(cache=True, inline="always", fastmath=_FASTMATH)
def _deriv(model_kind, theta, w1, b1, w2, b2, w3, b3,
           vx, vy, wz, roll, steer, thr, sin_steer, cos_steer,
           scratch, out4):
    if model_kind == MODEL_BASIS:
        feat = scratch[:BASIS_COUNT]
        _features_core(vx, vy, wz, roll, steer, thr, sin_steer, cos_steer,
                       feat)
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        for i in range(BASIS_COUNT):
            f = feat[i]
            a0 += theta[i, 0] * f
            a1 += theta[i, 1] * f
            a2 += theta[i, 2] * f
            a3 += theta[i, 3] * f
        out4[0] = a0
        out4[1] = a1
        out4[2] = a2
        out4[3] = a3
    else:
        n1 = b1.shape[0]
        n2 = b2.shape[0]
        z = scratch[:6]
        h1 = scratch[6:6 + n1]
        h2 = scratch[6 + n1:6 + n1 + n2]
        z[0] = vx
        z[1] = vy
        z[2] = wz
        z[3] = roll
        z[4] = steer
        z[5] = thr
        for i in range(n1):
            acc = b1[i]
            for j in range(6):
                acc += w1[i, j] * z[j]
            h1[i] = math.tanh(acc)
        for i in range(n2):
            acc = b2[i]
            for j in range(n1):
                acc += w2[i, j] * h1[j]
            h2[i] = math.tanh(acc)
        for i in range(OUTPUT_DIM):
            acc = b3[i]
            for j in range(n2):
                acc += w3[i, j] * h2[j]
            out4[i] = acc


@njit(cache=True)
def model_derivative(model_kind, theta, w1, b1, w2, b2, w3, b3,
                     vx, vy, wz, roll, steer, thr):
    """Single-sample model derivative (d v_x, d v_y, d yaw_rate, d roll)."""
    scratch = np.empty(6 + b1.shape[0] + b2.shape[0] + BASIS_COUNT)
    out4 = np.empty(OUTPUT_DIM)
    _deriv(model_kind, theta, w1, b1, w2, b2, w3, b3,
           vx, vy, wz, roll, steer, thr,
           math.sin(steer), math.cos(steer), scratch, out4)
    return out4


@njit(cache=True, inline="always", fastmath=_FASTMATH)
def _advance(state, steer, thr, dt, max_substep,
             model_kind, theta, w1, b1, w2, b2, w3, b3, scratch, out4):
    """One control interval: explicit Euler over <= max_substep slices."""
    nsub = int(math.ceil(dt / max_substep))
    if nsub < 1:
        nsub = 1
    h = dt / nsub
    sin_steer = math.sin(steer)
    cos_steer = math.cos(steer)
    for _ in range(nsub):
        yaw = state[IYAW]
        vx = state[IVX]
        vy = state[IVY]
        wz = state[IWZ]
        roll = state[IROLL]
        _deriv(model_kind, theta, w1, b1, w2, b2, w3, b3,
               vx, vy, wz, roll, steer, thr, sin_steer, cos_steer,
               scratch, out4)
        cy = math.cos(yaw)
        sy = math.sin(yaw)
        state[IX] += h * (vx * cy - vy * sy)
        state[IY] += h * (vx * sy + vy * cy)
        state[IYAW] = wrap_angle(yaw + h * wz)
        state[IVX] = vx + h * out4[0]
        state[IVY] = vy + h * out4[1]
        state[IWZ] = wz + h * out4[2]
        state[IROLL] = roll + h * out4[3]


@njit(cache=True, inline="always")
def _first_nonfinite(state):
    for i in range(STATE_DIM):
        if not math.isfinite(state[i]):
            return i
    return _NO_NAN


@njit(cache=True, parallel=True, fastmath=_FASTMATH)
def batch_rollout(x0, controls, dt, max_substep,
                  model_kind, theta, w1, b1, w2, b2, w3, b3,
                  out_states, out_err):
    """Roll N control sequences forward from N start states.

    x0          (N, 7)
    controls    (N, T, 2) steering, throttle; clamped here to [-1, 1]
    out_states  (N, T+1, 7); rows after a blow-up are left as NaN
    out_err     (N, 2) int64, (failing timestep, failing field) or (-1, -1)
    """
    n_samples = x0.shape[0]
    horizon = controls.shape[1]
    scratch_len = 6 + b1.shape[0] + b2.shape[0] + BASIS_COUNT
    for n in prange(n_samples):
        scratch = np.empty(scratch_len + OUTPUT_DIM + STATE_DIM)
        out4 = scratch[scratch_len:scratch_len + OUTPUT_DIM]
        state = scratch[scratch_len + OUTPUT_DIM:]
        for i in range(STATE_DIM):
            state[i] = x0[n, i]
            out_states[n, 0, i] = x0[n, i]
        out_err[n, 0] = _NO_NAN
        out_err[n, 1] = _NO_NAN
        for t in range(horizon):
            steer = controls[n, t, 0]
            thr = controls[n, t, 1]
            if steer > 1.0:
                steer = 1.0
            elif steer < -1.0:
                steer = -1.0
            if thr > 1.0:
                thr = 1.0
            elif thr < -1.0:
                thr = -1.0
            _advance(state, steer, thr, dt, max_substep,
                     model_kind, theta, w1, b1, w2, b2, w3, b3,
                     scratch, out4)
            bad = _first_nonfinite(state)
            if bad != _NO_NAN:
                out_err[n, 0] = t + 1
                out_err[n, 1] = bad
                for tt in range(t + 1, horizon + 1):
                    for i in range(STATE_DIM):
                        out_states[n, tt, i] = np.nan
                break
            for i in range(STATE_DIM):
                out_states[n, t + 1, i] = state[i]


@njit(cache=True, inline="always", fastmath=_FASTMATH)
def _segment_distance_sq(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq <= 0.0:
        t = 0.0
    else:
        t = ((px - ax) * dx + (py - ay) * dy) / seg_sq
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return ex * ex + ey * ey, t


@njit(cache=True, inline="always", fastmath=_FASTMATH)
def track_query_point(px, py, verts, seg_len, cum_arc, total_len,
                      grid_x0, grid_y0, grid_cell, grid_nx, grid_ny,
                      cell_v0, cell_win, cell_far):
    """Nearest-segment query against the closed resampled centerline.

    Returns (lateral distance, arc position in [0, total_len)). Points
    inside the padded grid scan only the candidate window precomputed for
    their cell; anything outside falls back to a full scan. Cells flagged
    "far" (every point provably beyond the saturation band of the cost
    field) take an O(1) nearest-vertex shortcut instead, which may
    over-estimate the offset by at most one vertex spacing.
    """
    nv = verts.shape[0]
    ix = int(math.floor((px - grid_x0) / grid_cell))
    iy = int(math.floor((py - grid_y0) / grid_cell))
    if 0 <= ix < grid_nx and 0 <= iy < grid_ny:
        c = iy * grid_nx + ix
        v0 = cell_v0[c]
        if cell_far[c]:
            dx = px - verts[v0, 0]
            dy = py - verts[v0, 1]
            return math.sqrt(dx * dx + dy * dy), cum_arc[v0]
        win = cell_win[c]
        lo = v0 - win - 1
        count = 2 * win + 2
        if count > nv:
            lo = 0
            count = nv
    else:
        lo = 0
        count = nv
    best = np.inf
    best_j = 0
    best_t = 0.0
    for k in range(count):
        j = (lo + k) % nv
        jn = j + 1
        if jn == nv:
            jn = 0
        d2, t = _segment_distance_sq(px, py, verts[j, 0], verts[j, 1],
                                     verts[jn, 0], verts[jn, 1])
        if d2 < best:
            best = d2
            best_j = j
            best_t = t
    if best_t >= 1.0:
        # Projections that land exactly on a segment end belong to the next
        # segment's start, so the seam vertex maps to arc 0, not total.
        best_j += 1
        if best_j == nv:
            best_j = 0
        best_t = 0.0
    arc = cum_arc[best_j] + best_t * seg_len[best_j]
    if arc >= total_len:
        arc -= total_len
    return math.sqrt(best), arc


@njit(cache=True)
def track_query_batch(xs, ys, verts, seg_len, cum_arc, total_len,
                      grid_x0, grid_y0, grid_cell, grid_nx, grid_ny,
                      cell_v0, cell_win, cell_far, out_e, out_s):
    for i in range(xs.shape[0]):
        e, s = track_query_point(xs[i], ys[i], verts, seg_len, cum_arc,
                                 total_len, grid_x0, grid_y0, grid_cell,
                                 grid_nx, grid_ny, cell_v0, cell_win,
                                 cell_far)
        out_e[i] = e
        out_s[i] = s


@njit(cache=True, inline="always")
def obstacle_cost_scalar(d, r1, r2, alpha, beta):
    if d <= r1:
        return beta
    if d <= r2:
        dd = r2 - d
        return alpha * dd * dd
    return 0.0


@njit(cache=True, inline="always", fastmath=_FASTMATH)
def _rel_longitudinal(ex, ey, eyaw, ox, oy):
    dx = ox - ex
    dy = oy - ey
    return math.cos(eyaw) * dx + math.sin(eyaw) * dy


@njit(cache=True, parallel=True, fastmath=_FASTMATH)
def batch_trajectory_cost(
        states, opp_xy, has_opp,
        verts, seg_len, cum_arc, total_len,
        grid_x0, grid_y0, grid_cell, grid_nx, grid_ny, cell_v0, cell_win,
        cell_far, half_width,
        w_track, w_speed, w_crash, w_slip, v_desired, crash_decay,
        roll_crash_threshold, v_floor,
        alpha, beta, r1, r2,
        pass_reward, overtaken_penalty, trail_collision_penalty,
        collision_radius, sign_deadband,
        out_costs):
    """Summed running + opponent cost of N trajectories (terminal cost 0).

    states   (N, T+1, 7), row 0 is the current state and contributes no
             cost; the crash-decay exponent is 0 at the first predicted
             state. NaN states (blown-up rollouts) cost +inf.
    opp_xy   (T+1, 2) opponent positions time-aligned with ``states``;
             ignored when has_opp is false.
    """
    n_samples = states.shape[0]
    horizon = states.shape[1] - 1
    for n in prange(n_samples):
        total = 0.0
        sign = 0
        if has_opp:
            lon0 = _rel_longitudinal(states[n, 0, IX], states[n, 0, IY],
                                     states[n, 0, IYAW],
                                     opp_xy[0, 0], opp_xy[0, 1])
            if lon0 > sign_deadband:
                sign = 1
            elif lon0 < -sign_deadband:
                sign = -1
        decay_pow = 1.0
        for t in range(1, horizon + 1):
            px = states[n, t, IX]
            py = states[n, t, IY]
            if not math.isfinite(px):
                total = np.inf
                break
            e, _ = track_query_point(px, py, verts, seg_len, cum_arc,
                                     total_len, grid_x0, grid_y0, grid_cell,
                                     grid_nx, grid_ny, cell_v0, cell_win,
                                     cell_far)
            ratio = e / half_width
            track_c = ratio * ratio
            if track_c > 1.0:
                track_c = 1.0
            vx = states[n, t, IVX]
            vy = states[n, t, IVY]
            roll = states[n, t, IROLL]
            dv = vx - v_desired
            crashed = 0.0
            if abs(roll) > roll_crash_threshold or e > 2.0 * half_width:
                crashed = 1.0
            vxr = abs(vx)
            if vxr < v_floor:
                vxr = v_floor
            slip = vy / vxr
            c = (w_track * track_c + w_speed * dv * dv
                 + w_crash * decay_pow * crashed + w_slip * slip * slip)
            if has_opp:
                ox = opp_xy[t, 0]
                oy = opp_xy[t, 1]
                ddx = px - ox
                ddy = py - oy
                d = math.sqrt(ddx * ddx + ddy * ddy)
                c += obstacle_cost_scalar(d, r1, r2, alpha, beta)
                lon = _rel_longitudinal(px, py, states[n, t, IYAW], ox, oy)
                new_sign = sign
                if lon > sign_deadband:
                    new_sign = 1
                elif lon < -sign_deadband:
                    new_sign = -1
                if sign == 1 and new_sign == -1:
                    c += pass_reward
                elif sign == -1 and new_sign == 1:
                    c += overtaken_penalty
                if d < collision_radius and new_sign == 1:
                    c += trail_collision_penalty
                sign = new_sign
            total += c
            decay_pow *= crash_decay
        out_costs[n] = total
