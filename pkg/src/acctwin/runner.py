"""Entity loops and system composition.

The physical-twin entity owns the simulated world, perception, and the PID
actuation; the digital-twin service owns ACC, latency accounting, and
telemetry storage. A combined runner wires the two through deterministic
simulated channels on a virtual clock; the split runners bind each entity
to a real UDP socket instead.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dtentity, perception, ptsim, wire
from .domain import EgoState, ObjectTrack
from .dtentity import AccParams, AccState, SpeedCommand, TelemetryStore
from .perception import Tracker, TrackerParams, cluster_summary, dbscan, scan_to_points
from .ptsim import SIM_DT, LidarConfig, Scenario, Scene, cast_scan, step_world
from .wire import (
    ClockOffset,
    LatencyMonitor,
    MessageEnvelope,
    SequenceSource,
    SequenceTracker,
    SimChannel,
    SimLink,
    Transport,
    UdpTransport,
    VirtualClock,
    ZERO_OFFSET,
    clock_sync,
    decode_message,
    encode_message,
    pack_ego_state,
    pack_speed_cmd,
    pack_time_resp,
    pack_tracks,
    unpack_ego_state,
    unpack_speed_cmd,
    unpack_tracks,
    wall_clock_us,
)

log = logging.getLogger("acctwin")

WORLD_STEP_US = int(SIM_DT * 1e6)          # 10 ms
LIDAR_PERIOD_US = 100_000                  # 10 Hz perception/TRACKS
EGO_PERIOD_US = 50_000                     # 20 Hz EGO_STATE
CONTROL_PERIOD_US = 100_000                # 10 Hz ACC / collection
COMMAND_WATCHDOG_US = 500_000              # coast to a stop past this silence
RESYNC_PERIOD_US = 30_000_000              # re-estimate clock offset every 30 s

# Speed-loop PID gains for the first-order plant; steady state requires
# u = C_DRAG * v / A_MAX, which the integral term supplies.
PID_KP = 0.8
PID_KI = 1.2


class PhysicalTwinEntity:
    """Vehicle-side loop: world stepping, perception, actuation, telemetry."""

    def __init__(
        self,
        scenario: Scenario,
        transport: Transport,
        clock_us: Callable[[], int],
        lidar_cfg: LidarConfig | None = None,
        tracker_params: TrackerParams | None = None,
    ) -> None:
        self.transport = transport
        self.clock_us = clock_us
        self.scene: Scene = scenario.scene
        self.lidar_cfg = lidar_cfg or LidarConfig()
        self.tracker = Tracker(tracker_params)
        self.rng = np.random.default_rng(scenario.seed)
        self.pid = ptsim.PidController(kp=PID_KP, ki=PID_KI)
        self.steering_cmd = scenario.scene.ego.steering_angle
        self.setpoint = 0.0
        self.sim_t = 0.0
        self.sequences = SequenceSource()
        self.seq_tracker = SequenceTracker()
        self.last_command_us: Optional[int] = None
        self.emergency = False
        self._next_scan_us = 0
        self._next_ego_us = 0
        self.last_confirmed: list[ObjectTrack] = []

    # -- receive path --

    def on_frame(self, frame: bytes, now_us: int) -> None:
        try:
            env = decode_message(frame)
        except wire.WireError:
            return
        self.seq_tracker.observe(env.msg_type, env.sequence)
        if env.msg_type == wire.MSG_SPEED_CMD:
            try:
                speed, emergency = unpack_speed_cmd(env.payload)
            except wire.WireError:
                return
            self.emergency = emergency
            self.setpoint = 0.0 if emergency else max(0.0, speed)
            self.last_command_us = now_us
        elif env.msg_type == wire.MSG_TIME_REQ:
            t = self.clock_us()
            resp = MessageEnvelope(
                msg_type=wire.MSG_TIME_RESP,
                sequence=self.sequences.next(wire.MSG_TIME_RESP),
                send_timestamp=t,
                payload=pack_time_resp(t, t),
            )
            self.transport.reply(encode_message(resp))

    # -- periodic work --

    def tick(self, now_us: int) -> None:
        """One 10 ms world step plus any due sensor/telemetry work."""
        if (
            self.last_command_us is None
            or now_us - self.last_command_us > COMMAND_WATCHDOG_US
        ):
            self.setpoint = 0.0  # link watchdog: no fresh command, coast
        motor = self.pid.step(self.setpoint, self.scene.ego.speed, SIM_DT)
        self.scene = step_world(self.scene, self.sim_t, SIM_DT, motor, self.steering_cmd)
        self.sim_t += SIM_DT

        if now_us >= self._next_scan_us:
            self._next_scan_us = now_us + LIDAR_PERIOD_US
            scan = cast_scan(self.scene, self.lidar_cfg, self.rng, timestamp=now_us)
            cloud = scan_to_points(scan, self.lidar_cfg)
            labels = dbscan(
                cloud.points, self.tracker.params.eps, self.tracker.params.min_pts
            )
            clusters = cluster_summary(cloud.points, labels)
            confirmed = self.tracker.step(clusters, now_us)
            self.last_confirmed = confirmed
            env = MessageEnvelope(
                msg_type=wire.MSG_TRACKS,
                sequence=self.sequences.next(wire.MSG_TRACKS),
                send_timestamp=self.clock_us(),
                payload=pack_tracks(confirmed),
            )
            self.transport.send(encode_message(env))

        if now_us >= self._next_ego_us:
            self._next_ego_us = now_us + EGO_PERIOD_US
            env = MessageEnvelope(
                msg_type=wire.MSG_EGO_STATE,
                sequence=self.sequences.next(wire.MSG_EGO_STATE),
                send_timestamp=self.clock_us(),
                payload=pack_ego_state(
                    self.scene.ego.speed, self.scene.ego.steering_angle
                ),
            )
            self.transport.send(encode_message(env))

    def gap_to_lead(self) -> Optional[float]:
        """True bumper-to-bumper gap, for scenario assertions."""
        footprint = self.scene.lead_footprint()
        if footprint is None:
            return None
        return footprint.bounds[0] - self.scene.ego.pose.x


@dataclass
class LinkStatus:
    synced: bool = False
    offset: ClockOffset = field(default_factory=lambda: ZERO_OFFSET)


class DigitalTwinService:
    """DT-side loop: ACC, latency monitoring, collection, snapshots."""

    def __init__(
        self,
        acc_params: AccParams,
        transport: Transport,
        clock_us: Callable[[], int],
        store: Optional[TelemetryStore] = None,
        set_speed: float = 0.0,
        enabled: bool = False,
        collection_active: bool = False,
    ) -> None:
        self.params = acc_params
        self.transport = transport
        self.clock_us = clock_us
        self.store = store
        self.acc = AccState(enabled=enabled, set_speed=set_speed)
        self.collection_active = collection_active
        self.monitor = LatencyMonitor()
        self.link = LinkStatus()
        self.sequences = SequenceSource()
        self.seq_tracker = SequenceTracker()
        self.latest_tracks: list[ObjectTrack] = []
        self.latest_speed = 0.0
        self.latest_steering = 0.0
        self.latest_ego_ts: Optional[int] = None
        self._next_control_us = 0
        self._last_sync_us: Optional[int] = None
        self.report_dir: Optional[Path] = (
            store.path.parent / "reports" if store is not None else None
        )

    # -- clock sync --

    def sync_clock(self, n_rounds: int = 8, round_timeout_s: float = 0.5) -> None:
        try:
            offset = clock_sync(
                self.transport,
                self.clock_us,
                n_rounds=n_rounds,
                round_timeout_s=round_timeout_s,
                sequences=self.sequences,
            )
        except wire.SyncFailed:
            log.warning("clock sync failed; continuing with zero offset")
            self.link = LinkStatus(synced=False, offset=ZERO_OFFSET)
        else:
            self.link = LinkStatus(synced=True, offset=offset)
        self._last_sync_us = self.clock_us()

    def _receiver_offset_us(self) -> int:
        # ClockOffset is remote minus local; latency accounting wants the
        # receiver (this side) minus the sender (the vehicle).
        return -self.link.offset.offset_us

    # -- receive path --

    def on_frame(self, frame: bytes, now_us: int) -> None:
        try:
            env = decode_message(frame)
        except wire.WireError:
            return
        self.seq_tracker.observe(env.msg_type, env.sequence)
        if env.msg_type == wire.MSG_EGO_STATE:
            try:
                speed, steering = unpack_ego_state(env.payload)
            except wire.WireError:
                return
            self.latest_speed = max(0.0, float(speed))
            self.latest_steering = float(steering)
            self.latest_ego_ts = env.send_timestamp
            self.monitor.record(env.send_timestamp, now_us, self._receiver_offset_us())
        elif env.msg_type == wire.MSG_TRACKS:
            try:
                self.latest_tracks = unpack_tracks(env.payload)
            except wire.WireError:
                return
            self.monitor.record(env.send_timestamp, now_us, self._receiver_offset_us())
        elif env.msg_type == wire.MSG_TIME_REQ:
            t = self.clock_us()
            resp = MessageEnvelope(
                msg_type=wire.MSG_TIME_RESP,
                sequence=self.sequences.next(wire.MSG_TIME_RESP),
                send_timestamp=t,
                payload=pack_time_resp(t, t),
            )
            self.transport.reply(encode_message(resp))

    # -- commands (from the gateway) --

    def apply_command(self, kind: str, value: Optional[float], now_us: int) -> None:
        if kind == "enable_acc":
            self.acc.enabled = True
            self.acc.emergency = False  # explicit enable clears the latch
        elif kind == "disable_acc":
            self.acc.enabled = False
        elif kind == "set_speed":
            self.acc.set_speed = float(value)
        elif kind == "emergency_brake":
            self.acc.emergency = True
        elif kind == "start_collection":
            self.collection_active = True
        elif kind == "stop_collection":
            self.collection_active = False
        else:
            raise ValueError(f"unknown command kind '{kind}'")
        if self.store is not None:
            self.store.record_command(now_us, kind, value)

    # -- periodic work --

    def ego_snapshot(self, now_us: int) -> EgoState:
        return EgoState(
            timestamp=now_us,
            speed=self.latest_speed,
            steering_angle=self.latest_steering,
            acc_enabled=self.acc.enabled,
            set_speed=self.acc.set_speed,
            commanded_speed=self.acc.last_command,
        )

    def tick(self, now_us: int) -> Optional[SpeedCommand]:
        if now_us < self._next_control_us:
            return None
        self._next_control_us = now_us + CONTROL_PERIOD_US
        ego = self.ego_snapshot(now_us)
        command, self.acc = dtentity.acc_step(
            self.acc, self.latest_tracks, ego, self.params
        )
        if command is not None:
            env = MessageEnvelope(
                msg_type=wire.MSG_SPEED_CMD,
                sequence=self.sequences.next(wire.MSG_SPEED_CMD),
                send_timestamp=self.clock_us(),
                payload=pack_speed_cmd(command.speed, command.emergency),
            )
            self.transport.send(encode_message(env))
        if self.collection_active and self.store is not None:
            self.store.collect(
                self.ego_snapshot(now_us), self.latest_tracks, now_us
            )
        return command

    def generate_report(self, from_us: int = 0, to_us: int = 2**62) -> dict:
        """Flush pending writes, then export the interval as CSV files."""
        if self.store is None or self.report_dir is None:
            raise RuntimeError("no telemetry store attached")
        self.store.flush()
        result = dtentity.generate_report(
            self.store.path, from_us, to_us, self.report_dir
        )
        self.store.record_command(self.clock_us(), "generate_report", None)
        return result

    # -- snapshot for the gateway --

    def snapshot(self, now_us: Optional[int] = None) -> dict:
        now_us = self.clock_us() if now_us is None else now_us
        stats = self.monitor.stats()
        ego = self.ego_snapshot(now_us)
        path = dtentity.project_path(ego)
        return {
            "ts_us": now_us,
            "ego": {
                "speed": ego.speed,
                "steering": ego.steering_angle,
                "acc_enabled": ego.acc_enabled,
                "set_speed": ego.set_speed,
                "commanded_speed": ego.commanded_speed,
            },
            "emergency": self.acc.emergency,
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
                    "color": "blue"
                    if t.object_class.value == "Vehicle"
                    else "cyan",
                }
                for t in self.latest_tracks
            ],
            "path": [[x, y] for x, y in path],
            "latency": {
                "mean_ms": stats["mean_ms"],
                "p95_ms": stats["p95_ms"],
                "max_ms": stats["max_ms"],
                "violations": stats["violation_count"],
            },
            "clock_offset_ms": self.link.offset.offset_us / 1000.0,
            "collection_active": self.collection_active,
        }


class CombinedRunner:
    """The whole DTS in one process over deterministic simulated channels."""

    def __init__(
        self,
        scenario: Scenario,
        data_dir: str | Path,
        collect: bool = True,
        acc_enabled: bool = True,
        store: Optional[TelemetryStore] = None,
    ) -> None:
        self.scenario = scenario
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        net = scenario.network
        # Distinct deterministic streams per direction.
        self.ch_pt_to_dt = SimChannel(
            net.delay_ms, net.jitter_ms, net.drop, seed=scenario.seed * 2 + 1
        )
        self.ch_dt_to_pt = SimChannel(
            net.delay_ms, net.jitter_ms, net.drop, seed=scenario.seed * 2 + 2
        )
        self.clock = VirtualClock()
        self.link = SimLink(self.ch_pt_to_dt, self.ch_dt_to_pt, self.clock)
        pt_transport = self.link.endpoint_a()
        dt_transport = self.link.endpoint_b()
        self.pt = PhysicalTwinEntity(scenario, pt_transport, self.clock.now_us)
        self.store = store or TelemetryStore(self.data_dir / "telemetry.sqlite")
        acc_params = AccParams(
            time_gap=scenario.acc.time_gap,
            standstill_dist=scenario.acc.standstill,
            kp_gap=scenario.acc.kp_gap,
        )
        self.dt = DigitalTwinService(
            acc_params,
            dt_transport,
            self.clock.now_us,
            store=self.store,
            set_speed=scenario.acc.set_speed,
            enabled=acc_enabled,
            collection_active=collect,
        )
        self.min_gap = math.inf

    def sync(self) -> None:
        """Cristian-style sync over the simulated link before the run."""
        self.link.responder_a = lambda frame: self.pt.on_frame(
            frame, self.clock.now_us()
        )
        try:
            self.dt.sync_clock(round_timeout_s=0.3)
        finally:
            self.link.responder_a = None

    def step(self) -> None:
        now = self.clock.now_us()
        for frame in self.ch_dt_to_pt.poll(now):
            self.pt.on_frame(frame, now)
        for frame in self.ch_pt_to_dt.poll(now):
            self.dt.on_frame(frame, now)
        self.pt.tick(now)
        self.dt.tick(now)
        gap = self.pt.gap_to_lead()
        if gap is not None:
            self.min_gap = min(self.min_gap, gap)
        self.clock.advance(WORLD_STEP_US)

    def run(
        self,
        duration_s: Optional[float] = None,
        realtime: bool = False,
        on_tick: Optional[Callable[["CombinedRunner"], None]] = None,
        stop: Optional[threading.Event] = None,
    ) -> None:
        duration_s = self.scenario.duration_s if duration_s is None else duration_s
        self.sync()
        steps = int(round(duration_s / SIM_DT))
        wall_start = time.monotonic()
        for k in range(steps):
            if stop is not None and stop.is_set():
                break
            self.step()
            if on_tick is not None:
                on_tick(self)
            if realtime:
                target = wall_start + (k + 1) * SIM_DT
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        self.store.flush()

    def close(self) -> None:
        self.store.close()


def attach_gateway(sim: CombinedRunner, snapshot_every_steps: int = 10):
    """Bridge a combined run to the gateway app.

    Returns (bridge, on_tick); pass on_tick to CombinedRunner.run so queued
    commands apply on the twin loop and the snapshot cell refreshes at 10 Hz.
    """
    from .gateway import GatewayBridge

    bridge = GatewayBridge(report_handler=sim.dt.generate_report)
    bridge.set_snapshot(sim.dt.snapshot())
    state = {"step": 0}

    def on_tick(r: CombinedRunner) -> None:
        for cmd in bridge.drain_commands():
            if cmd.kind == "generate_report":
                try:
                    r.dt.generate_report(cmd.from_us or 0, cmd.to_us or 2**62)
                except Exception as exc:
                    log.error("report generation failed: %s", exc)
            else:
                r.dt.apply_command(cmd.kind, cmd.value, r.clock.now_us())
        state["step"] += 1
        if state["step"] % snapshot_every_steps == 0:
            bridge.set_snapshot(r.dt.snapshot())

    return bridge, on_tick


def _drain(transport: Transport, handler: Callable[[bytes, int], None], now_us: int) -> None:
    while True:
        frame = transport.recv(timeout_s=0.0)
        if frame is None:
            return
        handler(frame, now_us)


def run_pt_udp(
    scenario: Scenario,
    listen_port: int,
    peer: Optional[tuple[str, int]],
    duration_s: Optional[float] = None,
    stop: Optional[threading.Event] = None,
) -> PhysicalTwinEntity:
    """Physical-twin entity on a real UDP socket, paced by the wall clock."""
    transport = UdpTransport(("0.0.0.0", listen_port), peer)
    pt = PhysicalTwinEntity(scenario, transport, wall_clock_us)
    deadline = None if duration_s is None else time.monotonic() + duration_s
    next_tick = time.monotonic()
    try:
        while deadline is None or time.monotonic() < deadline:
            if stop is not None and stop.is_set():
                break
            now_us = wall_clock_us()
            _drain(transport, pt.on_frame, now_us)
            pt.tick(now_us)
            next_tick += SIM_DT
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_tick = time.monotonic()
    finally:
        transport.close()
    return pt


def run_dt_udp(
    acc_params: AccParams,
    listen_port: int,
    peer: Optional[tuple[str, int]],
    store: Optional[TelemetryStore] = None,
    set_speed: float = 0.0,
    enabled: bool = False,
    collection_active: bool = False,
    duration_s: Optional[float] = None,
    stop: Optional[threading.Event] = None,
    on_tick: Optional[Callable[[DigitalTwinService], None]] = None,
) -> DigitalTwinService:
    """Digital-twin service on a real UDP socket, with periodic re-sync."""
    transport = UdpTransport(("0.0.0.0", listen_port), peer)
    dt = DigitalTwinService(
        acc_params,
        transport,
        wall_clock_us,
        store=store,
        set_speed=set_speed,
        enabled=enabled,
        collection_active=collection_active,
    )
    if peer is not None:
        dt.sync_clock(round_timeout_s=0.3)
    deadline = None if duration_s is None else time.monotonic() + duration_s
    next_tick = time.monotonic()
    try:
        while deadline is None or time.monotonic() < deadline:
            if stop is not None and stop.is_set():
                break
            now_us = wall_clock_us()
            _drain(transport, dt.on_frame, now_us)
            if (
                dt._last_sync_us is not None
                and now_us - dt._last_sync_us > RESYNC_PERIOD_US
            ):
                dt.sync_clock(round_timeout_s=0.3)
            dt.tick(now_us)
            if on_tick is not None:
                on_tick(dt)
            next_tick += SIM_DT
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_tick = time.monotonic()
    finally:
        if store is not None:
            store.flush()
        transport.close()
    return dt
