"""Simulated vehicle-to-vehicle pose channel.

The simulator produces state at the physics rate (200 Hz by default); a
per-vehicle downsampler re-emits the most recent sample at every
1/broadcast_hz boundary (10 Hz by default). Transmission applies a drop
probability and latency with uniform jitter, both driven by a seeded
generator so delivery traces replay exactly. Receivers keep only the
newest message per vehicle by sequence number, so late arrivals never
roll the view back.

Wire format: little-endian, 69 bytes — vehicle_id u8, seq u32, then
eight float64 fields (t_sent, x, y, yaw, roll, v_x, v_y, yaw_rate).
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .dynamics import VehicleState
from .errors import EmptyInboxError

WIRE_STRUCT = struct.Struct("<BI8d")
WIRE_SIZE = WIRE_STRUCT.size  # 69 bytes

_BOUNDARY_EPS = 1e-12


@dataclass(frozen=True)
class PoseMessage:
    vehicle_id: int
    seq: int
    t_sent: float
    x: float
    y: float
    yaw: float
    roll: float
    v_x: float
    v_y: float
    yaw_rate: float

    def __post_init__(self):
        vals = (self.t_sent, self.x, self.y, self.yaw, self.roll,
                self.v_x, self.v_y, self.yaw_rate)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("pose message fields must be finite")

    @staticmethod
    def from_state(vehicle_id: int, seq: int, t: float,
                   state: VehicleState) -> "PoseMessage":
        return PoseMessage(vehicle_id=vehicle_id, seq=seq, t_sent=t,
                           x=state.x, y=state.y, yaw=state.yaw,
                           roll=state.roll, v_x=state.v_x, v_y=state.v_y,
                           yaw_rate=state.yaw_rate)


def encode_pose(msg: PoseMessage) -> bytes:
    return WIRE_STRUCT.pack(msg.vehicle_id, msg.seq, msg.t_sent, msg.x,
                            msg.y, msg.yaw, msg.roll, msg.v_x, msg.v_y,
                            msg.yaw_rate)


def decode_pose(buf: bytes) -> PoseMessage:
    if len(buf) != WIRE_SIZE:
        raise ValueError(f"pose record must be {WIRE_SIZE} bytes, got {len(buf)}")
    vid, seq, t, x, y, yaw, roll, vx, vy, wz = WIRE_STRUCT.unpack(buf)
    return PoseMessage(vehicle_id=vid, seq=seq, t_sent=t, x=x, y=y, yaw=yaw,
                       roll=roll, v_x=vx, v_y=vy, yaw_rate=wz)


@dataclass(frozen=True)
class ChannelParams:
    broadcast_hz: float = 10.0
    latency_mean: float = 0.03
    latency_jitter: float = 0.01
    drop_prob: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if self.broadcast_hz <= 0:
            raise ValueError("broadcast_hz must be positive")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must be in [0, 1)")
        if self.latency_mean < 0 or self.latency_jitter < 0:
            raise ValueError("latency values must be >= 0")


class StreamDownsampler:
    """Incremental zero-order-hold downsampler for one vehicle's stream.

    Boundaries sit at t_first + k/broadcast_hz; each boundary emits the
    most recent sample at or before it, so the output never exceeds
    broadcast_hz. Sequence numbers increase by one per emission.
    """

    def __init__(self, broadcast_hz: float, vehicle_id: int = 0,
                 start_seq: int = 0):
        if broadcast_hz <= 0:
            raise ValueError("broadcast_hz must be positive")
        self.hz = float(broadcast_hz)
        self.vehicle_id = vehicle_id
        self.seq = start_seq
        self._t0: Optional[float] = None
        self._held: Optional[tuple[float, VehicleState]] = None
        self._emitted = 0

    def _next_boundary(self) -> float:
        return self._t0 + self._emitted / self.hz

    def _emit(self, t: float, state: VehicleState) -> PoseMessage:
        msg = PoseMessage.from_state(self.vehicle_id, self.seq, t, state)
        self.seq += 1
        self._emitted += 1
        return msg

    def push(self, t: float, state: VehicleState) -> list[PoseMessage]:
        if self._held is not None and t < self._held[0]:
            raise ValueError("timestamps must be non-decreasing")
        if self._t0 is None:
            self._t0 = t
        out = []
        # Boundaries strictly before this sample are served by the held one.
        while self._held is not None and self._next_boundary() < t - _BOUNDARY_EPS:
            out.append(self._emit(*self._held))
        self._held = (t, state)
        if t >= self._next_boundary() - _BOUNDARY_EPS:
            out.append(self._emit(t, state))
        return out


def downsample(stream: Iterable[tuple[float, VehicleState]],
               broadcast_hz: float, vehicle_id: int = 0) -> list[PoseMessage]:
    """Batch form of :class:`StreamDownsampler` over a finite stream."""
    ds = StreamDownsampler(broadcast_hz, vehicle_id)
    out = []
    for t, state in stream:
        out.extend(ds.push(t, state))
    return out


@dataclass(frozen=True)
class DeliveryEvent:
    deliver_at: float
    message: PoseMessage


def transmit(msg: PoseMessage, params: ChannelParams, now: float,
             rng: np.random.Generator) -> Optional[DeliveryEvent]:
    """Schedule one message: None when dropped, else its delivery time.

    Latency is latency_mean + uniform(-jitter, +jitter), clamped to never
    deliver before ``now``. Dropped messages consume exactly one draw so
    traces stay aligned and reproducible.
    """
    if rng.random() < params.drop_prob:
        return None
    delay = params.latency_mean
    if params.latency_jitter > 0:
        delay += rng.uniform(-params.latency_jitter, params.latency_jitter)
    return DeliveryEvent(deliver_at=max(now, now + delay), message=msg)


class Channel:
    """Seeded lossy broadcast channel with an in-flight delivery queue."""

    def __init__(self, params: ChannelParams):
        self.params = params
        self.rng = np.random.default_rng(params.rng_seed)
        self._queue: list[tuple[float, int, PoseMessage]] = []
        self._tie = 0
        self.sent = 0
        self.dropped = 0
        self.delivered = 0

    def send(self, msg: PoseMessage, now: float) -> Optional[float]:
        self.sent += 1
        event = transmit(msg, self.params, now, self.rng)
        if event is None:
            self.dropped += 1
            return None
        self._tie += 1
        heapq.heappush(self._queue, (event.deliver_at, self._tie, event.message))
        return event.deliver_at

    def poll(self, now: float) -> list[PoseMessage]:
        """All messages due at or before ``now``, in delivery order."""
        out = []
        while self._queue and self._queue[0][0] <= now:
            _, _, msg = heapq.heappop(self._queue)
            out.append(msg)
            self.delivered += 1
        return out

    def pending(self) -> int:
        return len(self._queue)


class Inbox:
    """Latest pose per vehicle, newest-by-seq; late arrivals are ignored."""

    def __init__(self):
        self._latest: dict[int, PoseMessage] = {}

    def deliver(self, msg: PoseMessage) -> bool:
        cur = self._latest.get(msg.vehicle_id)
        if cur is None or msg.seq > cur.seq:
            self._latest[msg.vehicle_id] = msg
            return True
        return False

    def receive_latest(self, vehicle_id: int, now: float
                       ) -> tuple[PoseMessage, float]:
        """Newest message and its age; EmptyInboxError before first receipt."""
        msg = self._latest.get(vehicle_id)
        if msg is None:
            raise EmptyInboxError(
                f"no pose ever received for vehicle {vehicle_id}")
        return msg, now - msg.t_sent
