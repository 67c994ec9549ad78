"""Digital-twin entity: offloaded ACC, telemetry storage, and reporting.

The ACC is a class-I constant-time-gap follower: it picks the nearest
in-corridor vehicle track ahead of the ego, regulates the gap toward
standstill_dist + time_gap * ego_speed, and otherwise holds the set speed.
Telemetry lands in an embedded sqlite store through a bounded writer queue
so persistence can never stall the 10 Hz control loop.
"""

from __future__ import annotations

import math
import queue
import sqlite3
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .domain import (
    EgoState,
    ObjectClass,
    ObjectTrack,
    TimestampUs,
    WHEELBASE,
    clamp,
)

EGO_CSV_HEADER = "ts_us,speed_mps,steering_rad,acc_enabled,set_speed_mps,commanded_speed_mps"
TRACKS_CSV_HEADER = "ts_us,track_id,x_m,y_m,vx_mps,vy_mps,length_m,width_m,class,state"

STRAIGHT_STEER_EPS = 1e-3  # rad; below this the projected path is a line


@dataclass(frozen=True)
class AccParams:
    time_gap: float = 1.5            # s
    standstill_dist: float = 0.5     # m
    kp_gap: float = 0.5              # 1/s
    corridor_half_width: float = 0.25  # m
    v_set_max: float = 3.0           # m/s

    def __post_init__(self) -> None:
        for name in (
            "time_gap",
            "standstill_dist",
            "kp_gap",
            "corridor_half_width",
            "v_set_max",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.8 <= self.time_gap <= 2.2:
            raise ValueError("time_gap must lie in [0.8, 2.2]")


@dataclass
class AccState:
    enabled: bool = False
    set_speed: float = 0.0
    emergency: bool = False
    last_command: float = 0.0


@dataclass(frozen=True)
class SpeedCommand:
    speed: float
    emergency: bool = False


def select_lead(
    tracks: Sequence[ObjectTrack], params: AccParams
) -> Optional[ObjectTrack]:
    """Nearest vehicle track ahead of the ego inside the driving corridor."""
    candidates = [
        t
        for t in tracks
        if t.x > 0
        and abs(t.y) <= params.corridor_half_width
        and t.object_class is ObjectClass.VEHICLE
    ]
    if not candidates:
        return None
    return min(candidates, key=lambda t: (t.x, t.id))


def acc_following_speed(
    lead: ObjectTrack, ego_speed: float, state: AccState, params: AccParams
) -> float:
    """Constant-time-gap following speed for the given lead track.

    Track velocity is relative, so the lead's longitudinal speed over
    ground is ego_speed + lead.vx.
    """
    d = lead.x
    d_des = params.standstill_dist + params.time_gap * ego_speed
    v_lead_long = ego_speed + lead.vx
    v_cmd = v_lead_long + params.kp_gap * (d - d_des)
    return clamp(v_cmd, 0.0, state.set_speed)


def acc_step(
    state: AccState,
    tracks: Sequence[ObjectTrack],
    ego: EgoState,
    params: AccParams,
) -> tuple[Optional[SpeedCommand], AccState]:
    """One ACC control tick.

    Emergency is latched: once braked, the command stays zero until the
    operator explicitly re-enables ACC. When disabled, no command is sent.
    """
    if state.emergency:
        state.last_command = 0.0
        return SpeedCommand(0.0, emergency=True), state
    if not state.enabled:
        return None, state
    lead = select_lead(tracks, params)
    if lead is None:
        command = clamp(state.set_speed, 0.0, state.set_speed)
    else:
        command = acc_following_speed(lead, ego.speed, state, params)
    state.last_command = command
    return SpeedCommand(command), state


def project_path(
    ego: EgoState, horizon_m: float = 2.0, n_points: int = 20
) -> list[tuple[float, float]]:
    """Projected driving path in the vehicle frame at the current steering.

    A near-zero steering angle projects a straight segment; otherwise the
    points sit on the constant-curvature arc of radius wheelbase/tan(steer).
    """
    steer = ego.steering_angle
    step = horizon_m / n_points
    if abs(steer) < STRAIGHT_STEER_EPS:
        return [(step * (i + 1), 0.0) for i in range(n_points)]
    radius = WHEELBASE / math.tan(steer)
    points = []
    for i in range(n_points):
        s = step * (i + 1)
        points.append(
            (radius * math.sin(s / radius), radius * (1.0 - math.cos(s / radius)))
        )
    return points


def build_viz_frame(
    ego: EgoState,
    tracks: Sequence[ObjectTrack],
    path: Sequence[tuple[float, float]],
    latency: dict,
    acc: AccState,
    clock_offset_ms: float = 0.0,
) -> dict:
    """Scene document for the cockpit: ego green, vehicles blue, obstacles cyan."""
    return {
        "ego": {
            "color": "green",
            "x": 0.0,
            "y": 0.0,
            "length": 0.4,
            "width": 0.2,
            "speed": ego.speed,
            "steering": ego.steering_angle,
        },
        "tracks": [
            {
                "id": t.id,
                "x": t.x,
                "y": t.y,
                "vx": t.vx,
                "vy": t.vy,
                "length": t.length,
                "width": t.width,
                "class": t.object_class.value,
                "lifecycle": t.lifecycle.value,
                "color": "blue" if t.object_class is ObjectClass.VEHICLE else "cyan",
            }
            for t in tracks
        ],
        "path": [[x, y] for x, y in path],
        "latency": latency,
        "acc": {
            "enabled": acc.enabled,
            "set_speed": acc.set_speed,
            "emergency": acc.emergency,
            "last_command": acc.last_command,
        },
        "clock_offset_ms": clock_offset_ms,
    }


# -- storage -----------------------------------------------------------------

_SCHEMA = """
CREATE TABLE IF NOT EXISTS ego_state (
    ts_us INTEGER, speed REAL, steering REAL, acc_enabled INTEGER,
    set_speed REAL, commanded_speed REAL
);
CREATE TABLE IF NOT EXISTS tracks (
    ts_us INTEGER, track_id INTEGER, x REAL, y REAL, vx REAL, vy REAL,
    length REAL, width REAL, class TEXT, state TEXT
);
CREATE TABLE IF NOT EXISTS commands (
    ts_us INTEGER, kind TEXT, value REAL
);
"""


class TelemetryStore:
    """Embedded sqlite store fed by a bounded background writer.

    collect() enqueues one sample; a dedicated thread owns the write
    connection and commits each sample atomically. When the queue is full
    the oldest pending sample is dropped and counted, keeping the control
    path non-blocking. flush() drains the queue for readers.
    """

    QUEUE_CAPACITY = 1024

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._queue: queue.Queue = queue.Queue(maxsize=self.QUEUE_CAPACITY)
        self.dropped_samples = 0
        self.write_errors = 0
        self._closed = False
        self._idle = threading.Event()
        self._idle.set()
        # Writer thread owns its connection; bootstrap the schema here so
        # readers can open the file immediately.
        with sqlite3.connect(self.path) as conn:
            conn.executescript(_SCHEMA)
        self._thread = threading.Thread(target=self._writer_loop, daemon=True)
        self._thread.start()

    # -- producer side --

    def collect(
        self,
        ego: EgoState,
        tracks: Sequence[ObjectTrack],
        ts_us: TimestampUs,
    ) -> None:
        """Queue one sample (one ego row plus one row per track)."""
        if self._closed:
            raise RuntimeError("store is closed")
        item = ("sample", ts_us, ego, tuple(tracks))
        self._enqueue(item)

    def record_command(self, ts_us: TimestampUs, kind: str, value: float | None) -> None:
        if self._closed:
            raise RuntimeError("store is closed")
        self._enqueue(("command", ts_us, kind, value))

    def _enqueue(self, item: tuple) -> None:
        self._idle.clear()
        while True:
            try:
                self._queue.put_nowait(item)
                return
            except queue.Full:
                try:
                    self._queue.get_nowait()
                    self.dropped_samples += 1
                except queue.Empty:
                    pass

    # -- writer thread --

    def _writer_loop(self) -> None:
        conn = sqlite3.connect(self.path)
        try:
            while True:
                try:
                    item = self._queue.get(timeout=0.05)
                except queue.Empty:
                    self._idle.set()
                    if self._closed:
                        return
                    continue
                if item is None:
                    self._idle.set()
                    return
                try:
                    self._write(conn, item)
                except sqlite3.Error:
                    self.write_errors += 1
                finally:
                    self._queue.task_done()
        finally:
            conn.close()

    @staticmethod
    def _write(conn: sqlite3.Connection, item: tuple) -> None:
        if item[0] == "sample":
            _, ts_us, ego, tracks = item
            with conn:
                conn.execute(
                    "INSERT INTO ego_state VALUES (?, ?, ?, ?, ?, ?)",
                    (
                        ts_us,
                        ego.speed,
                        ego.steering_angle,
                        int(ego.acc_enabled),
                        ego.set_speed,
                        ego.commanded_speed,
                    ),
                )
                conn.executemany(
                    "INSERT INTO tracks VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    [
                        (
                            ts_us,
                            t.id,
                            t.x,
                            t.y,
                            t.vx,
                            t.vy,
                            t.length,
                            t.width,
                            t.object_class.value,
                            t.lifecycle.value,
                        )
                        for t in tracks
                    ],
                )
        else:
            _, ts_us, kind, value = item
            with conn:
                conn.execute(
                    "INSERT INTO commands VALUES (?, ?, ?)", (ts_us, kind, value)
                )

    # -- lifecycle --

    def flush(self, timeout_s: float = 5.0) -> None:
        """Block until every queued write has been committed."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self._queue.empty() and self._idle.is_set():
                return
            time.sleep(0.001)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._queue.put(None)
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "TelemetryStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _fmt(value: float) -> str:
    return format(value, ".6g")


def generate_report(
    store_path: str | Path,
    t_from: TimestampUs,
    t_to: TimestampUs,
    out_dir: str | Path,
) -> dict:
    """Export stored samples in [t_from, t_to] as two timeseries CSV files."""
    if t_from > t_to:
        raise ValueError(f"empty interval: from {t_from} > to {t_to}")
    store_path = Path(store_path)
    if not store_path.exists():
        raise FileNotFoundError(f"no telemetry store at {store_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ego_path = out_dir / "ego_state.csv"
    tracks_path = out_dir / "tracks.csv"
    conn = sqlite3.connect(store_path)
    try:
        ego_rows = conn.execute(
            "SELECT ts_us, speed, steering, acc_enabled, set_speed, commanded_speed "
            "FROM ego_state WHERE ts_us BETWEEN ? AND ? ORDER BY ts_us",
            (t_from, t_to),
        ).fetchall()
        track_rows = conn.execute(
            "SELECT ts_us, track_id, x, y, vx, vy, length, width, class, state "
            "FROM tracks WHERE ts_us BETWEEN ? AND ? ORDER BY ts_us, track_id",
            (t_from, t_to),
        ).fetchall()
    finally:
        conn.close()

    with open(ego_path, "w", newline="\n") as f:
        f.write(EGO_CSV_HEADER + "\n")
        for ts, speed, steering, enabled, set_speed, cmd in ego_rows:
            f.write(
                f"{ts},{_fmt(speed)},{_fmt(steering)},{int(enabled)},"
                f"{_fmt(set_speed)},{_fmt(cmd)}\n"
            )
    with open(tracks_path, "w", newline="\n") as f:
        f.write(TRACKS_CSV_HEADER + "\n")
        for ts, tid, x, y, vx, vy, length, width, cls, state in track_rows:
            f.write(
                f"{ts},{tid},{_fmt(x)},{_fmt(y)},{_fmt(vx)},{_fmt(vy)},"
                f"{_fmt(length)},{_fmt(width)},{cls},{state}\n"
            )
    return {
        "ego_csv_path": str(ego_path),
        "tracks_csv_path": str(tracks_path),
        "row_counts": {"ego": len(ego_rows), "tracks": len(track_rows)},
    }
