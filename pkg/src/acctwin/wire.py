"""Inter-entity transport: binary framing, clock sync, latency accounting.

Every datagram carries one frame: a 20-byte header followed by the payload.
Header layout (all multi-byte fields little-endian):

    offset 0-3   magic, ASCII "DT01"
    offset 4     version (0x01)
    offset 5     message type
    offset 6-7   payload length, u16
    offset 8-11  sequence number, u32 (per sender and message type)
    offset 12-19 send timestamp, u64 microseconds

Payload formats per message type:

    EGO_STATE  speed f32 | steering f32
    TRACKS     count u16, then per track:
               id u32, x f32, y f32, vx f32, vy f32, length f32, width f32,
               class u8 (0=Vehicle, 1=Obstacle), lifecycle u8 (0=Tentative,
               1=Confirmed)
    SPEED_CMD  commanded_speed f32 | flags u8 (bit0 = emergency brake)
    TIME_REQ   empty
    TIME_RESP  t1 u64 (peer receive time) | t2 u64 (peer send time)

Telemetry is fire-and-forget: no retransmission, no acknowledgements.
Sequence gaps are counted by the receiver, never repaired.
"""

from __future__ import annotations

import heapq
import math
import random
import socket
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .domain import ObjectClass, ObjectTrack, TimestampUs, TrackLifecycle

MAGIC = b"DT01"
VERSION = 1

MSG_EGO_STATE = 0x01
MSG_TRACKS = 0x02
MSG_SPEED_CMD = 0x03
MSG_TIME_REQ = 0x04
MSG_TIME_RESP = 0x05

_KNOWN_TYPES = frozenset(
    {MSG_EGO_STATE, MSG_TRACKS, MSG_SPEED_CMD, MSG_TIME_REQ, MSG_TIME_RESP}
)

_HEADER = struct.Struct("<4sBBHIQ")
HEADER_SIZE = _HEADER.size  # 20

_EGO_PAYLOAD = struct.Struct("<ff")
_SPEED_CMD_PAYLOAD = struct.Struct("<fB")
_TIME_RESP_PAYLOAD = struct.Struct("<QQ")
_TRACK_RECORD = struct.Struct("<IffffffBB")  # 30 bytes per track
_TRACK_COUNT = struct.Struct("<H")

FLAG_EMERGENCY = 0x01

MAX_PAYLOAD = 65535

DEFAULT_PT_PORT = 47001
DEFAULT_DT_PORT = 47002


class WireError(Exception):
    """Base class for frame encode/decode failures."""


class BadMagic(WireError):
    """Frame does not start with the protocol magic/version."""


class UnknownType(WireError):
    """Header message type is not one of the defined types."""


class TruncatedFrame(WireError):
    """Frame length is inconsistent with the header (short or trailing bytes)."""


class SyncFailed(WireError):
    """Clock synchronization completed zero successful rounds."""


@dataclass(frozen=True)
class MessageEnvelope:
    """One wire frame; immutable once constructed."""

    msg_type: int
    sequence: int
    send_timestamp: TimestampUs
    payload: bytes = b""
    version: int = VERSION

    def __post_init__(self) -> None:
        if self.msg_type not in _KNOWN_TYPES:
            raise ValueError(f"unknown message type 0x{self.msg_type:02x}")
        if len(self.payload) > MAX_PAYLOAD:
            raise ValueError(f"payload too large: {len(self.payload)} bytes")
        if self.sequence < 0 or self.send_timestamp < 0:
            raise ValueError("sequence and timestamp must be non-negative")


def encode_message(envelope: MessageEnvelope) -> bytes:
    """Serialize an envelope to header || payload bytes."""
    header = _HEADER.pack(
        MAGIC,
        envelope.version,
        envelope.msg_type,
        len(envelope.payload),
        envelope.sequence & 0xFFFFFFFF,
        envelope.send_timestamp,
    )
    return header + envelope.payload


def decode_message(frame: bytes) -> MessageEnvelope:
    """Parse one frame; raises BadMagic, UnknownType, or TruncatedFrame.

    The decoder is total: any byte string yields either an envelope or
    exactly one of the three error types.
    """
    if len(frame) >= 4 and frame[:4] != MAGIC:
        raise BadMagic(f"bad magic {frame[:4]!r}")
    if len(frame) < HEADER_SIZE:
        raise TruncatedFrame(f"frame too short: {len(frame)} bytes")
    magic, version, msg_type, payload_len, sequence, send_ts = _HEADER.unpack_from(
        frame
    )
    if version != VERSION:
        raise BadMagic(f"unsupported version {version}")
    if msg_type not in _KNOWN_TYPES:
        raise UnknownType(f"unknown message type 0x{msg_type:02x}")
    if len(frame) - HEADER_SIZE != payload_len:
        raise TruncatedFrame(
            f"payload length mismatch: header says {payload_len}, "
            f"got {len(frame) - HEADER_SIZE}"
        )
    return MessageEnvelope(
        msg_type=msg_type,
        sequence=sequence,
        send_timestamp=send_ts,
        payload=frame[HEADER_SIZE:],
    )


# -- payload codecs ----------------------------------------------------------

def pack_ego_state(speed: float, steering: float) -> bytes:
    return _EGO_PAYLOAD.pack(speed, steering)


def unpack_ego_state(payload: bytes) -> tuple[float, float]:
    if len(payload) != _EGO_PAYLOAD.size:
        raise TruncatedFrame("EGO_STATE payload must be 8 bytes")
    return _EGO_PAYLOAD.unpack(payload)


def pack_speed_cmd(commanded_speed: float, emergency: bool = False) -> bytes:
    flags = FLAG_EMERGENCY if emergency else 0
    return _SPEED_CMD_PAYLOAD.pack(commanded_speed, flags)


def unpack_speed_cmd(payload: bytes) -> tuple[float, bool]:
    if len(payload) != _SPEED_CMD_PAYLOAD.size:
        raise TruncatedFrame("SPEED_CMD payload must be 5 bytes")
    speed, flags = _SPEED_CMD_PAYLOAD.unpack(payload)
    return speed, bool(flags & FLAG_EMERGENCY)


def pack_time_resp(t1: TimestampUs, t2: TimestampUs) -> bytes:
    return _TIME_RESP_PAYLOAD.pack(t1, t2)


def unpack_time_resp(payload: bytes) -> tuple[int, int]:
    if len(payload) != _TIME_RESP_PAYLOAD.size:
        raise TruncatedFrame("TIME_RESP payload must be 16 bytes")
    return _TIME_RESP_PAYLOAD.unpack(payload)


_CLASS_CODE = {ObjectClass.VEHICLE: 0, ObjectClass.OBSTACLE: 1}
_CLASS_FROM_CODE = {v: k for k, v in _CLASS_CODE.items()}
_LIFECYCLE_CODE = {TrackLifecycle.TENTATIVE: 0, TrackLifecycle.CONFIRMED: 1}
_LIFECYCLE_FROM_CODE = {v: k for k, v in _LIFECYCLE_CODE.items()}


def pack_tracks(tracks: Iterable[ObjectTrack]) -> bytes:
    records = list(tracks)
    out = [_TRACK_COUNT.pack(len(records))]
    for t in records:
        out.append(
            _TRACK_RECORD.pack(
                t.id,
                t.x,
                t.y,
                t.vx,
                t.vy,
                t.length,
                t.width,
                _CLASS_CODE[t.object_class],
                _LIFECYCLE_CODE[t.lifecycle],
            )
        )
    return b"".join(out)


def unpack_tracks(payload: bytes) -> list[ObjectTrack]:
    if len(payload) < _TRACK_COUNT.size:
        raise TruncatedFrame("TRACKS payload missing count")
    (count,) = _TRACK_COUNT.unpack_from(payload)
    expected = _TRACK_COUNT.size + count * _TRACK_RECORD.size
    if len(payload) != expected:
        raise TruncatedFrame(
            f"TRACKS payload length mismatch: expected {expected}, got {len(payload)}"
        )
    tracks = []
    offset = _TRACK_COUNT.size
    for _ in range(count):
        tid, x, y, vx, vy, length, width, cls, life = _TRACK_RECORD.unpack_from(
            payload, offset
        )
        offset += _TRACK_RECORD.size
        if cls not in _CLASS_FROM_CODE or life not in _LIFECYCLE_FROM_CODE:
            raise UnknownType(f"bad track class/lifecycle codes ({cls}, {life})")
        tracks.append(
            ObjectTrack(
                id=tid,
                x=x,
                y=y,
                vx=vx,
                vy=vy,
                length=length,
                width=width,
                object_class=_CLASS_FROM_CODE[cls],
                lifecycle=_LIFECYCLE_FROM_CODE[life],
            )
        )
    return tracks


# -- sequence bookkeeping ----------------------------------------------------

class SequenceSource:
    """Per-message-type outgoing sequence counters for one sender."""

    def __init__(self) -> None:
        self._next: dict[int, int] = {}

    def next(self, msg_type: int) -> int:
        seq = self._next.get(msg_type, 0)
        self._next[msg_type] = seq + 1
        return seq


class SequenceTracker:
    """Counts sequence gaps per message type on the receive side."""

    def __init__(self) -> None:
        self._last: dict[int, int] = {}
        self.gaps = 0

    def observe(self, msg_type: int, sequence: int) -> None:
        last = self._last.get(msg_type)
        if last is not None and sequence > last + 1:
            self.gaps += sequence - last - 1
        if last is None or sequence > last:
            self._last[msg_type] = sequence


# -- latency monitoring ------------------------------------------------------

@dataclass
class ClockOffset:
    """Offset of the remote clock relative to the local one (remote - local)."""

    offset_us: int
    rtt_us: int
    rounds_used: int

    def __post_init__(self) -> None:
        if self.rtt_us < 0:
            raise ValueError("rtt must be non-negative")
        if self.rounds_used < 1:
            raise ValueError("at least one sync round is required")


ZERO_OFFSET = ClockOffset(offset_us=0, rtt_us=0, rounds_used=1)

LATENCY_THRESHOLD_MS = 100.0
LATENCY_WINDOW = 256


class LatencyMonitor:
    """One-way latency samples against the 100 ms budget.

    The window keeps the most recent samples for the statistics; the
    violation and sample counters are cumulative over the whole run so a
    violation is never forgotten once it scrolls out of the window.
    """

    def __init__(
        self,
        threshold_ms: float = LATENCY_THRESHOLD_MS,
        window: int = LATENCY_WINDOW,
    ) -> None:
        self.threshold_ms = threshold_ms
        self.samples_ms: deque[float] = deque(maxlen=window)
        self.violation_count = 0
        self.total_count = 0
        self.clock_skew_events = 0

    def record(
        self,
        send_ts: TimestampUs,
        recv_ts: TimestampUs,
        offset: ClockOffset | int = ZERO_OFFSET,
    ) -> float:
        """Record one sample; returns the latency in milliseconds.

        ``offset`` must be the receiver clock minus the sender clock. When
        the receiver ran clock_sync against the sender, that is the negated
        sync result (ClockOffset.offset_us is remote minus local).
        """
        offset_us = offset.offset_us if isinstance(offset, ClockOffset) else offset
        latency_us = recv_ts - (send_ts + offset_us)
        if latency_us < 0:
            latency_us = 0
            self.clock_skew_events += 1
        latency_ms = latency_us / 1000.0
        self.samples_ms.append(latency_ms)
        self.total_count += 1
        if latency_ms > self.threshold_ms:
            self.violation_count += 1
        return latency_ms

    def stats(self) -> dict:
        """Statistics over the current window plus cumulative counters."""
        if not self.samples_ms:
            return {
                "count": 0,
                "mean_ms": 0.0,
                "p95_ms": 0.0,
                "max_ms": 0.0,
                "violation_count": self.violation_count,
            }
        ordered = sorted(self.samples_ms)
        n = len(ordered)
        rank = max(1, math.ceil(0.95 * n))  # nearest-rank percentile
        return {
            "count": n,
            "mean_ms": sum(ordered) / n,
            "p95_ms": ordered[rank - 1],
            "max_ms": ordered[-1],
            "violation_count": self.violation_count,
        }


def record_latency(
    monitor: LatencyMonitor,
    send_ts: TimestampUs,
    recv_ts: TimestampUs,
    offset: ClockOffset | int = ZERO_OFFSET,
) -> LatencyMonitor:
    monitor.record(send_ts, recv_ts, offset)
    return monitor


def latency_stats(monitor: LatencyMonitor) -> dict:
    return monitor.stats()


# -- transports --------------------------------------------------------------

class Transport:
    """Minimal frame transport: send raw frames, poll for received ones."""

    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout_s: float = 0.0) -> Optional[bytes]:
        """Next frame, or None if none arrives within the timeout."""
        raise NotImplementedError

    def reply(self, frame: bytes) -> None:
        """Answer the sender of the most recently received frame.

        Defaults to send(); datagram transports override it so one-shot
        clients (the probe tool) get responses at their source address.
        """
        self.send(frame)


class UdpTransport(Transport):
    """One UDP socket talking to a fixed peer; one frame per datagram."""

    def __init__(
        self,
        listen: tuple[str, int],
        peer: Optional[tuple[str, int]] = None,
    ) -> None:
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(listen)
        self.peer = peer
        self.last_source: Optional[tuple[str, int]] = None

    @property
    def local_address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def send(self, frame: bytes) -> None:
        if self.peer is None:
            raise RuntimeError("no peer address known yet")
        self.sock.sendto(frame, self.peer)

    def reply(self, frame: bytes) -> None:
        target = self.last_source or self.peer
        if target is None:
            raise RuntimeError("nothing to reply to")
        self.sock.sendto(frame, target)

    def recv(self, timeout_s: float = 0.0) -> Optional[bytes]:
        self.sock.settimeout(timeout_s if timeout_s > 0 else 0.000001)
        try:
            frame, addr = self.sock.recvfrom(65536)
        except (socket.timeout, BlockingIOError):
            return None
        self.last_source = addr
        if self.peer is None:
            self.peer = addr  # lock onto the first peer that talks to us
        return frame

    def close(self) -> None:
        self.sock.close()


class VirtualClock:
    """Deterministic microsecond clock for simulated runs."""

    def __init__(self, start_us: int = 0) -> None:
        self._now_us = start_us

    def now_us(self) -> int:
        return self._now_us

    def advance(self, dt_us: int) -> None:
        if dt_us < 0:
            raise ValueError("clock cannot run backwards")
        self._now_us += dt_us


def wall_clock_us() -> int:
    return time.time_ns() // 1000


class SimChannel:
    """Deterministic one-way channel with delay, jitter, and drop.

    Given the same seed and the same send sequence, the delivery schedule is
    byte-identical between runs. Jitter is uniform in [0, jitter_ms].
    """

    def __init__(
        self,
        base_delay_ms: float = 0.0,
        jitter_ms: float = 0.0,
        drop_probability: float = 0.0,
        seed: int = 0,
    ) -> None:
        if not 0.0 <= drop_probability <= 1.0:
            raise ValueError("drop probability must be in [0, 1]")
        self.base_delay_us = int(base_delay_ms * 1000)
        self.jitter_us = int(jitter_ms * 1000)
        self.drop_probability = drop_probability
        self._rng = random.Random(seed)
        self._queue: list[tuple[int, int, bytes]] = []
        self._tie = 0
        self.sent = 0
        self.dropped = 0

    def send(self, frame: bytes, now_us: int) -> Optional[int]:
        """Schedule a frame; returns its delivery time, or None if dropped."""
        self.sent += 1
        if self.drop_probability > 0 and self._rng.random() < self.drop_probability:
            self.dropped += 1
            return None
        jitter = self._rng.randint(0, self.jitter_us) if self.jitter_us else 0
        deliver_at = now_us + self.base_delay_us + jitter
        self._tie += 1
        heapq.heappush(self._queue, (deliver_at, self._tie, frame))
        return deliver_at

    def poll(self, now_us: int) -> list[bytes]:
        """Frames whose delivery time has been reached, in delivery order."""
        due = []
        while self._queue and self._queue[0][0] <= now_us:
            due.append(heapq.heappop(self._queue)[2])
        return due

    def pending(self) -> int:
        return len(self._queue)


class SimLink:
    """A bidirectional link between two endpoints over SimChannels.

    Endpoint "a" sends over the forward channel and receives from the
    backward one; "b" is the mirror image. recv() advances the shared
    virtual clock until a frame is due, invoking the peer's responder on
    every delivery so request/response exchanges work single-threaded.
    """

    POLL_STEP_US = 100

    def __init__(
        self,
        forward: SimChannel,
        backward: SimChannel,
        clock: Optional[VirtualClock] = None,
    ) -> None:
        self.forward = forward
        self.backward = backward
        self.clock = clock or VirtualClock()
        self._inbox_a: deque[bytes] = deque()
        self._inbox_b: deque[bytes] = deque()
        self.responder_a: Optional[Callable[[bytes], None]] = None
        self.responder_b: Optional[Callable[[bytes], None]] = None

    def endpoint_a(self) -> "SimTransport":
        return SimTransport(self, side="a")

    def endpoint_b(self) -> "SimTransport":
        return SimTransport(self, side="b")

    def _pump(self) -> None:
        now = self.clock.now_us()
        for frame in self.forward.poll(now):
            if self.responder_b is not None:
                self.responder_b(frame)
            else:
                self._inbox_b.append(frame)
        for frame in self.backward.poll(now):
            if self.responder_a is not None:
                self.responder_a(frame)
            else:
                self._inbox_a.append(frame)

    def _send(self, side: str, frame: bytes) -> None:
        channel = self.forward if side == "a" else self.backward
        channel.send(frame, self.clock.now_us())

    def _recv(self, side: str, timeout_s: float) -> Optional[bytes]:
        inbox = self._inbox_a if side == "a" else self._inbox_b
        deadline = self.clock.now_us() + int(timeout_s * 1e6)
        self._pump()
        while not inbox:
            if self.clock.now_us() >= deadline:
                return None
            self.clock.advance(self.POLL_STEP_US)
            self._pump()
        return inbox.popleft()


class SimTransport(Transport):
    def __init__(self, link: SimLink, side: str) -> None:
        self.link = link
        self.side = side

    def send(self, frame: bytes) -> None:
        self.link._send(self.side, frame)

    def recv(self, timeout_s: float = 0.0) -> Optional[bytes]:
        return self.link._recv(self.side, timeout_s)


# -- clock synchronization ---------------------------------------------------

def make_time_responder(
    transport: Transport, clock_us: Callable[[], int], sequences: SequenceSource
) -> Callable[[bytes], None]:
    """Returns a frame handler that answers TIME_REQ with TIME_RESP."""

    def respond(frame: bytes) -> None:
        try:
            env = decode_message(frame)
        except WireError:
            return
        if env.msg_type != MSG_TIME_REQ:
            return
        t1 = clock_us()  # receive and send collapse to one instant here
        t2 = clock_us()
        resp = MessageEnvelope(
            msg_type=MSG_TIME_RESP,
            sequence=sequences.next(MSG_TIME_RESP),
            send_timestamp=t2,
            payload=pack_time_resp(t1, t2),
        )
        transport.reply(encode_message(resp))

    return respond


def clock_sync(
    transport: Transport,
    clock_us: Callable[[], int] = wall_clock_us,
    n_rounds: int = 8,
    round_timeout_s: float = 0.5,
    sequences: Optional[SequenceSource] = None,
) -> ClockOffset:
    """Estimate the peer clock offset via request/response rounds.

    Each round records local send time t0, peer receive time t1, peer send
    time t2, and local receive time t3, then computes

        offset = ((t1 - t0) + (t2 - t3)) / 2
        rtt    = (t3 - t0) - (t2 - t1)

    The result is taken from the minimum-RTT round, where the symmetric-delay
    assumption is most plausible. Raises SyncFailed if no round completes.
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    sequences = sequences or SequenceSource()
    best: Optional[tuple[int, int]] = None  # (rtt, offset)
    rounds_ok = 0
    for _ in range(n_rounds):
        t0 = clock_us()
        req = MessageEnvelope(
            msg_type=MSG_TIME_REQ,
            sequence=sequences.next(MSG_TIME_REQ),
            send_timestamp=t0,
        )
        transport.send(encode_message(req))
        # Deadline on the caller's clock so both wall and virtual time work.
        deadline = clock_us() + int(round_timeout_s * 1e6)
        response = None
        while True:
            remaining_s = (deadline - clock_us()) / 1e6
            if remaining_s <= 0:
                break
            frame = transport.recv(timeout_s=remaining_s)
            if frame is None:
                break
            try:
                env = decode_message(frame)
            except WireError:
                continue
            if env.msg_type == MSG_TIME_RESP:
                response = env
                break
        if response is None:
            continue
        t3 = clock_us()
        t1, t2 = unpack_time_resp(response.payload)
        offset = ((t1 - t0) + (t2 - t3)) // 2
        rtt = (t3 - t0) - (t2 - t1)
        rounds_ok += 1
        if best is None or rtt < best[0]:
            best = (rtt, offset)
    if best is None:
        raise SyncFailed(f"no TIME_RESP received in {n_rounds} rounds")
    return ClockOffset(offset_us=best[1], rtt_us=max(0, best[0]), rounds_used=rounds_ok)
