import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from acctwin.domain import (
    EgoState,
    ObjectClass,
    ObjectTrack,
    Pose2D,
    TrackLifecycle,
    clamp,
    wrap_angle,
)


class TestWrapAngle:
    def test_zero_is_identity(self):
        assert wrap_angle(0.0) == 0.0

    def test_three_pi_wraps_to_pi(self):
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)

    def test_negative_three_and_half_pi(self):
        # -3.5*pi + 2*tau = 0.5*pi
        assert wrap_angle(-3.5 * math.pi) == pytest.approx(0.5 * math.pi)

    @pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            wrap_angle(bad)

    @given(st.floats(min_value=-1e6, max_value=1e6))
    def test_result_in_half_open_interval(self, theta):
        w = wrap_angle(theta)
        assert -math.pi < w <= math.pi

    @given(st.floats(min_value=-1e3, max_value=1e3))
    def test_idempotent(self, theta):
        w = wrap_angle(theta)
        assert wrap_angle(w) == pytest.approx(w, abs=1e-12)

    @given(st.floats(min_value=-1e3, max_value=1e3))
    def test_congruent_mod_tau(self, theta):
        w = wrap_angle(theta)
        k = (theta - w) / math.tau
        assert k == pytest.approx(round(k), abs=1e-9)


class TestClamp:
    def test_above(self):
        assert clamp(5, 0, 3) == 3

    def test_below(self):
        assert clamp(-1, 0, 3) == 0

    def test_inside_is_identity(self):
        assert clamp(2, 0, 3) == 2

    def test_rejects_inverted_range(self):
        with pytest.raises(ValueError):
            clamp(1, 3, 0)


class TestPose2D:
    def test_heading_normalized_on_construction(self):
        pose = Pose2D(1.0, 2.0, 3 * math.pi)
        assert pose.heading == pytest.approx(math.pi)

    def test_plain_heading_kept(self):
        assert Pose2D(0, 0, 0.3).heading == 0.3


class TestEgoState:
    def _make(self, **overrides):
        base = dict(
            timestamp=0,
            speed=1.0,
            steering_angle=0.1,
            acc_enabled=True,
            set_speed=2.0,
            commanded_speed=1.5,
        )
        base.update(overrides)
        return EgoState(**base)

    def test_valid(self):
        assert self._make().speed == 1.0

    @pytest.mark.parametrize("field", ["speed", "set_speed", "commanded_speed"])
    def test_rejects_negative_speeds(self, field):
        with pytest.raises(ValueError):
            self._make(**{field: -0.01})

    def test_rejects_negative_timestamp(self):
        with pytest.raises(ValueError):
            self._make(timestamp=-1)


class TestObjectTrack:
    def _make(self, **overrides):
        base = dict(
            id=1,
            x=2.0,
            y=0.0,
            vx=0.0,
            vy=0.0,
            length=0.3,
            width=0.2,
            object_class=ObjectClass.VEHICLE,
            lifecycle=TrackLifecycle.CONFIRMED,
        )
        base.update(overrides)
        return ObjectTrack(**base)

    def test_valid(self):
        assert self._make().id == 1

    def test_rejects_non_positive_id(self):
        with pytest.raises(ValueError):
            self._make(id=0)

    def test_rejects_non_positive_extent(self):
        with pytest.raises(ValueError):
            self._make(length=0.0)
