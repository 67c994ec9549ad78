"""Shared domain types and unit conventions.

All quantities are SI: metres, metres/second, radians, integer microseconds.
The vehicle frame has x forward and y left, origin at the rear-axle center.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

# 1/10-scale platform limits; configurable per scenario, these are the defaults.
V_MAX = 3.0            # m/s
STEER_MAX = 0.35       # rad
WHEELBASE = 0.33       # m

TimestampUs = int      # microseconds since epoch (or sim start), non-negative


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    wrapped = math.remainder(theta, math.tau)
    if wrapped <= -math.pi:
        wrapped += math.tau
    return wrapped


def clamp(v: float, lo: float, hi: float) -> float:
    """Clamp v into [lo, hi]."""
    if lo > hi:
        raise ValueError(f"empty clamp range: lo={lo} > hi={hi}")
    return min(hi, max(lo, v))


class ObjectClass(enum.Enum):
    VEHICLE = "Vehicle"
    OBSTACLE = "Obstacle"


class TrackLifecycle(enum.Enum):
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"


@dataclass(frozen=True)
class Pose2D:
    """Planar pose; heading is normalized to (-pi, pi] on construction."""

    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class EgoState:
    """Ego vehicle state snapshot plus the ACC-related command context."""

    timestamp: TimestampUs
    speed: float
    steering_angle: float
    acc_enabled: bool
    set_speed: float
    commanded_speed: float

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        for name in ("speed", "set_speed", "commanded_speed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not all(
            math.isfinite(getattr(self, n))
            for n in ("speed", "steering_angle", "set_speed", "commanded_speed")
        ):
            raise ValueError("ego state fields must be finite")


@dataclass(frozen=True)
class ObjectTrack:
    """Confirmed or tentative object state estimate in the ego vehicle frame.

    Position and velocity are relative to the ego vehicle; extent is the
    axis-aligned footprint of the underlying cluster.
    """

    id: int
    x: float
    y: float
    vx: float
    vy: float
    length: float
    width: float
    object_class: ObjectClass
    lifecycle: TrackLifecycle
    hits: int = 0
    misses: int = 0

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise ValueError("track id must be positive")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("track extent must be positive")
        if self.hits < 0 or self.misses < 0:
            raise ValueError("hit/miss counts must be non-negative")
