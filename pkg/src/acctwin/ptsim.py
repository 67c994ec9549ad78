"""Physical-twin world: vehicle plant, scripted lead, simulated LiDAR.

The plant is a first-order longitudinal model with drag plus a kinematic
bicycle for steering. The LiDAR is a planar ray-cast against the lead
vehicle footprint and static obstacles, with seeded Gaussian range noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .domain import Pose2D, STEER_MAX, V_MAX, WHEELBASE, clamp, wrap_angle

A_MAX = 2.0     # m/s^2 at full motor command
C_DRAG = 0.5    # 1/s, speed-proportional drag
SIM_DT = 0.01   # s, fixed world step
STICTION_SPEED = 1e-4  # m/s; coasting below this snaps to a standstill


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2D
    speed: float = 0.0
    steering_angle: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.speed <= V_MAX:
            raise ValueError(f"speed {self.speed} outside [0, {V_MAX}]")
        if abs(self.steering_angle) > STEER_MAX:
            raise ValueError(f"steering {self.steering_angle} exceeds {STEER_MAX}")


class PidController:
    """PID with output clamping and integral anti-windup."""

    def __init__(
        self,
        kp: float,
        ki: float = 0.0,
        kd: float = 0.0,
        u_min: float = -1.0,
        u_max: float = 1.0,
    ) -> None:
        if u_min > u_max:
            raise ValueError("u_min must not exceed u_max")
        self.kp = kp
        self.ki = ki
        self.kd = kd
        self.u_min = u_min
        self.u_max = u_max
        self.integral = 0.0
        self.prev_error = 0.0

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error = 0.0

    def step(self, setpoint: float, measured: float, dt: float) -> float:
        if dt <= 0:
            raise ValueError("dt must be positive")
        if not (math.isfinite(setpoint) and math.isfinite(measured)):
            raise ValueError("setpoint and measurement must be finite")
        error = setpoint - measured
        self.integral += error * dt
        if self.ki != 0.0:
            # keep the integral term alone inside the output range
            lo, hi = sorted((self.u_min / self.ki, self.u_max / self.ki))
            self.integral = clamp(self.integral, lo, hi)
        derivative = (error - self.prev_error) / dt
        self.prev_error = error
        u = self.kp * error + self.ki * self.integral + self.kd * derivative
        return clamp(u, self.u_min, self.u_max)


def step_vehicle(
    state: VehicleState,
    motor_command: float,
    steering_cmd: float,
    dt: float,
) -> VehicleState:
    """Advance the plant one explicit-Euler step.

    Position and heading integrate the pre-step speed; dt is capped at
    100 ms to keep the integration honest.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    motor_command = clamp(motor_command, -1.0, 1.0)
    steering = clamp(steering_cmd, -STEER_MAX, STEER_MAX)
    pose = state.pose
    heading = pose.heading
    new_x = pose.x + state.speed * math.cos(heading) * dt
    new_y = pose.y + state.speed * math.sin(heading) * dt
    new_heading = wrap_angle(
        heading + (state.speed / WHEELBASE) * math.tan(steering) * dt
    )
    accel = motor_command * A_MAX - C_DRAG * state.speed
    new_speed = clamp(state.speed + accel * dt, 0.0, V_MAX)
    if accel <= 0.0 and new_speed < STICTION_SPEED:
        new_speed = 0.0
    return VehicleState(
        pose=Pose2D(new_x, new_y, new_heading),
        speed=new_speed,
        steering_angle=steering,
    )


# -- LiDAR -------------------------------------------------------------------

@dataclass(frozen=True)
class LidarConfig:
    """Planar scanner of the 10 m / 270-degree class."""

    fov: float = math.radians(270.0)
    angular_resolution: float = math.radians(0.25)
    range_max: float = 10.0
    noise_sigma: float = 0.01

    @property
    def beam_count(self) -> int:
        return int(math.floor(self.fov / self.angular_resolution)) + 1

    def beam_angles(self) -> np.ndarray:
        """Beam angles in the sensor (vehicle) frame, sweeping the fov."""
        return -self.fov / 2 + np.arange(self.beam_count) * self.angular_resolution


@dataclass(frozen=True)
class LidarScan:
    timestamp: int
    ranges: np.ndarray  # metres, one per beam; range_max means no return


@dataclass(frozen=True)
class Circle:
    x: float
    y: float
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("circle radius must be positive")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle given by center and full extents."""

    x: float
    y: float
    length: float  # along world x
    width: float   # along world y

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ValueError("rect extents must be positive")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        hx, hy = self.length / 2, self.width / 2
        return self.x - hx, self.x + hx, self.y - hy, self.y + hy


Obstacle = Union[Circle, Rect]


@dataclass(frozen=True)
class SpeedProfile:
    """Piecewise-linear time -> speed mapping; clamped outside the support."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        times = [t for t, _ in self.points]
        if not self.points:
            raise ValueError("profile needs at least one point")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("profile times must be strictly increasing")
        if any(v < 0 for _, v in self.points):
            raise ValueError("profile speeds must be non-negative")

    def speed_at(self, t: float) -> float:
        times = [p[0] for p in self.points]
        speeds = [p[1] for p in self.points]
        return float(np.interp(t, times, speeds))


@dataclass(frozen=True)
class LeadSpec:
    """Lead vehicle: starts lane_offset metres ahead of the ego, same lane."""

    lane_offset: float
    profile: SpeedProfile
    length: float = 0.4
    width: float = 0.2


@dataclass(frozen=True)
class Scene:
    ego: VehicleState
    lead: Optional[VehicleState] = None
    lead_spec: Optional[LeadSpec] = None
    obstacles: tuple[Obstacle, ...] = ()

    def lead_footprint(self) -> Optional[Rect]:
        if self.lead is None or self.lead_spec is None:
            return None
        return Rect(
            x=self.lead.pose.x,
            y=self.lead.pose.y,
            length=self.lead_spec.length,
            width=self.lead_spec.width,
        )


def _ray_circle(ox, oy, dx, dy, circle: Circle) -> np.ndarray:
    """Per-beam hit distance against a circle; inf where the ray misses."""
    ocx = circle.x - ox
    ocy = circle.y - oy
    proj = dx * ocx + dy * ocy
    disc = proj * proj - (ocx * ocx + ocy * ocy - circle.radius**2)
    t = np.full_like(dx, np.inf)
    hit = disc >= 0
    if not hit.any():
        return t
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = proj - root
    far = proj + root
    t_hit = np.where(near > 1e-12, near, np.where(far > 1e-12, far, np.inf))
    t[hit] = t_hit[hit]
    return t


def _ray_rect(ox, oy, dx, dy, rect: Rect) -> np.ndarray:
    """Per-beam hit distance against an axis-aligned rectangle (slab test)."""
    xmin, xmax, ymin, ymax = rect.bounds
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        sdx = np.where(dx == 0.0, 1e-300, dx)
        sdy = np.where(dy == 0.0, 1e-300, dy)
        tx1 = (xmin - ox) / sdx
        tx2 = (xmax - ox) / sdx
        ty1 = (ymin - oy) / sdy
        ty2 = (ymax - oy) / sdy
    tmin = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
    tmax = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
    hit = (tmax >= tmin) & (tmax > 1e-12)
    t = np.where(tmin > 1e-12, tmin, tmax)
    return np.where(hit, t, np.inf)


def cast_scan(
    scene: Scene,
    cfg: LidarConfig,
    rng: Union[np.random.Generator, int, None] = None,
    timestamp: int = 0,
) -> LidarScan:
    """Ray-cast one scan from the ego pose; deterministic for a given seed.

    Beams sweep the fov centered on the ego heading. Beams without a hit
    carry exactly range_max; noisy hits are clipped into (0, range_max].
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    angles = scene.ego.pose.heading + cfg.beam_angles()
    dx = np.cos(angles)
    dy = np.sin(angles)
    ox, oy = scene.ego.pose.x, scene.ego.pose.y
    dist = np.full(cfg.beam_count, np.inf)
    shapes: list[Obstacle] = list(scene.obstacles)
    footprint = scene.lead_footprint()
    if footprint is not None:
        shapes.append(footprint)
    for shape in shapes:
        if isinstance(shape, Circle):
            t = _ray_circle(ox, oy, dx, dy, shape)
        else:
            t = _ray_rect(ox, oy, dx, dy, shape)
        dist = np.minimum(dist, t)
    ranges = np.where(dist < cfg.range_max, dist, cfg.range_max)
    hit = ranges < cfg.range_max
    if cfg.noise_sigma > 0 and hit.any():
        noise = rng.normal(0.0, cfg.noise_sigma, size=cfg.beam_count)
        noisy = np.where(hit, ranges + noise, ranges)
        ranges = np.clip(noisy, 1e-6, cfg.range_max)
    return LidarScan(timestamp=timestamp, ranges=ranges)


def step_world(
    scene: Scene,
    t: float,
    dt: float,
    motor_command: float = 0.0,
    steering_cmd: float = 0.0,
) -> Scene:
    """Advance lead (profile-driven) and ego (actuated) by one step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    new_lead = scene.lead
    if scene.lead is not None and scene.lead_spec is not None:
        lead_speed = scene.lead_spec.profile.speed_at(t)
        pose = scene.lead.pose
        new_lead = VehicleState(
            pose=Pose2D(pose.x + lead_speed * dt, pose.y, pose.heading),
            speed=clamp(lead_speed, 0.0, V_MAX),
            steering_angle=0.0,
        )
    new_ego = step_vehicle(scene.ego, motor_command, steering_cmd, dt)
    return replace(scene, ego=new_ego, lead=new_lead)


# -- scenario files ----------------------------------------------------------

@dataclass(frozen=True)
class NetworkParams:
    delay_ms: float = 20.0
    jitter_ms: float = 0.0
    drop: float = 0.0


@dataclass(frozen=True)
class AccScenarioParams:
    set_speed: float = 2.0
    time_gap: float = 1.5
    standstill: float = 0.5
    kp_gap: float = 0.5


@dataclass(frozen=True)
class Scenario:
    scene: Scene
    network: NetworkParams
    acc: AccScenarioParams
    seed: int
    duration_s: float = 60.0


class ScenarioError(ValueError):
    """Scenario file missing, unparsable, or semantically invalid."""


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ScenarioError(f"{where}: missing key '{key}'")
    return mapping[key]


def _parse_obstacle(spec: dict, index: int) -> Obstacle:
    where = f"obstacles[{index}]"
    kind = _require(spec, "kind", where)
    try:
        if kind == "circle":
            return Circle(
                x=float(_require(spec, "x", where)),
                y=float(_require(spec, "y", where)),
                radius=float(_require(spec, "radius", where)),
            )
        if kind == "rect":
            return Rect(
                x=float(_require(spec, "x", where)),
                y=float(_require(spec, "y", where)),
                length=float(_require(spec, "length", where)),
                width=float(_require(spec, "width", where)),
            )
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from exc
    raise ScenarioError(f"{where}: unknown kind '{kind}'")


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario root must be a JSON object")
    ego_doc = _require(doc, "ego", "scenario")
    try:
        ego = VehicleState(
            pose=Pose2D(
                float(ego_doc.get("x", 0.0)),
                float(ego_doc.get("y", 0.0)),
                float(ego_doc.get("heading", 0.0)),
            ),
            speed=float(ego_doc.get("speed", 0.0)),
        )
    except ValueError as exc:
        raise ScenarioError(f"ego: {exc}") from exc

    lead = None
    lead_spec = None
    if doc.get("lead") is not None:
        lead_doc = doc["lead"]
        try:
            profile = SpeedProfile(
                tuple(
                    (float(t), float(v))
                    for t, v in _require(lead_doc, "profile", "lead")
                )
            )
            lead_spec = LeadSpec(
                lane_offset=float(_require(lead_doc, "lane_offset", "lead")),
                profile=profile,
                length=float(lead_doc.get("length", 0.4)),
                width=float(lead_doc.get("width", 0.2)),
            )
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"lead: {exc}") from exc
        heading = ego.pose.heading
        lead = VehicleState(
            pose=Pose2D(
                ego.pose.x + lead_spec.lane_offset * math.cos(heading),
                ego.pose.y + lead_spec.lane_offset * math.sin(heading),
                heading,
            ),
            speed=clamp(profile.speed_at(0.0), 0.0, V_MAX),
        )

    obstacles = tuple(
        _parse_obstacle(o, i) for i, o in enumerate(doc.get("obstacles", []))
    )
    net_doc = doc.get("network", {})
    network = NetworkParams(
        delay_ms=float(net_doc.get("delay_ms", 20.0)),
        jitter_ms=float(net_doc.get("jitter_ms", 0.0)),
        drop=float(net_doc.get("drop", 0.0)),
    )
    acc_doc = doc.get("acc", {})
    acc = AccScenarioParams(
        set_speed=float(acc_doc.get("set_speed", 2.0)),
        time_gap=float(acc_doc.get("time_gap", 1.5)),
        standstill=float(acc_doc.get("standstill", 0.5)),
        kp_gap=float(acc_doc.get("kp_gap", 0.5)),
    )
    return Scenario(
        scene=Scene(ego=ego, lead=lead, lead_spec=lead_spec, obstacles=obstacles),
        network=network,
        acc=acc,
        seed=int(doc.get("seed", 0)),
        duration_s=float(doc.get("duration_s", 60.0)),
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}"
        ) from exc
    try:
        return parse_scenario(doc)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
