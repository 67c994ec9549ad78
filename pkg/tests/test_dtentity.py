import csv
import math
import pathlib
import sqlite3
import tempfile

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acctwin.domain import EgoState, ObjectClass, ObjectTrack, TrackLifecycle, WHEELBASE
from acctwin.dtentity import (
    EGO_CSV_HEADER,
    TRACKS_CSV_HEADER,
    AccParams,
    AccState,
    TelemetryStore,
    acc_following_speed,
    acc_step,
    build_viz_frame,
    generate_report,
    project_path,
    select_lead,
)


def track(tid=1, x=2.0, y=0.0, vx=0.0, vy=0.0, cls=ObjectClass.VEHICLE):
    return ObjectTrack(
        id=tid,
        x=x,
        y=y,
        vx=vx,
        vy=vy,
        length=0.3,
        width=0.2,
        object_class=cls,
        lifecycle=TrackLifecycle.CONFIRMED,
    )


def ego(speed=1.0, steering=0.0, enabled=True, set_speed=2.0, commanded=0.0, ts=0):
    return EgoState(
        timestamp=ts,
        speed=speed,
        steering_angle=steering,
        acc_enabled=enabled,
        set_speed=set_speed,
        commanded_speed=commanded,
    )


class TestAccParams:
    def test_defaults_valid(self):
        assert AccParams().time_gap == 1.5

    def test_time_gap_bounds(self):
        with pytest.raises(ValueError):
            AccParams(time_gap=0.5)
        with pytest.raises(ValueError):
            AccParams(time_gap=2.5)

    def test_positivity(self):
        with pytest.raises(ValueError):
            AccParams(kp_gap=0.0)


class TestSelectLead:
    def test_no_tracks(self):
        assert select_lead([], AccParams()) is None

    def test_corridor_filters_lateral_track(self):
        lead = select_lead(
            [track(1, 2.0, 0.05), track(2, 1.5, 1.0)], AccParams()
        )
        assert lead.id == 1 and lead.x == 2.0

    def test_behind_ego_ignored(self):
        assert select_lead([track(1, -1.0, 0.0)], AccParams()) is None

    def test_obstacles_ignored(self):
        assert (
            select_lead([track(1, 2.0, 0.0, cls=ObjectClass.OBSTACLE)], AccParams())
            is None
        )

    def test_nearest_wins_tie_by_id(self):
        a, b, c = track(3, 2.0), track(1, 2.0), track(2, 3.0)
        assert select_lead([a, b, c], AccParams()).id == 1

    @given(st.permutations(list(range(5))))
    def test_permutation_invariant(self, order):
        tracks = [
            track(1, 2.0, 0.1),
            track(2, 1.4, 0.0),
            track(3, 0.9, 0.9),
            track(4, 5.0, -0.2),
            track(5, -2.0, 0.0),
        ]
        shuffled = [tracks[i] for i in order]
        assert select_lead(shuffled, AccParams()).id == 2


class TestFollowingSpeed:
    def test_zero_gap_error_tracks_lead(self):
        # ego 1.0 m/s -> d_des = 0.5 + 1.5 = 2.0; put the lead right there
        state = AccState(enabled=True, set_speed=2.0)
        v = acc_following_speed(track(1, 2.0, 0.0, vx=0.0), 1.0, state, AccParams())
        assert v == pytest.approx(1.0)

    def test_gap_surplus_speeds_up(self):
        # d=3, d_des=2, v_lead=1.0, kp=0.5 -> 1.0 + 0.5 = 1.5 (under set 2.0)
        state = AccState(enabled=True, set_speed=2.0)
        v = acc_following_speed(track(1, 3.0, 0.0, vx=0.0), 1.0, state, AccParams())
        assert v == pytest.approx(1.5)

    def test_standstill(self):
        state = AccState(enabled=True, set_speed=2.0)
        v = acc_following_speed(track(1, 0.5, 0.0, vx=0.0), 0.0, state, AccParams())
        assert v == 0.0

    def test_clamped_to_set_speed(self):
        state = AccState(enabled=True, set_speed=1.2)
        v = acc_following_speed(track(1, 10.0, 0.0, vx=1.0), 2.0, state, AccParams())
        assert v == 1.2

    def test_monotone_in_distance(self):
        state = AccState(enabled=True, set_speed=3.0)
        params = AccParams()
        speeds = [
            acc_following_speed(track(1, d, 0.0), 1.0, state, params)
            for d in [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
        ]
        assert all(b >= a for a, b in zip(speeds, speeds[1:]))


class TestAccStep:
    def test_no_lead_requests_set_speed(self):
        state = AccState(enabled=True, set_speed=2.0)
        command, state = acc_step(state, [], ego(), AccParams())
        assert command.speed == 2.0
        assert state.last_command == 2.0

    def test_emergency_latches_zero(self):
        state = AccState(enabled=True, set_speed=2.0, emergency=True)
        command, state = acc_step(state, [track()], ego(), AccParams())
        assert command.speed == 0.0 and command.emergency

    def test_disabled_emits_nothing(self):
        state = AccState(enabled=False, set_speed=2.0)
        command, _ = acc_step(state, [track()], ego(), AccParams())
        assert command is None

    @settings(max_examples=300)
    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=-5, max_value=10),
                st.floats(min_value=-2, max_value=2),
                st.floats(min_value=-3, max_value=3),
                st.booleans(),
            ),
            max_size=4,
        ),
        st.floats(min_value=0, max_value=3),
        st.floats(min_value=0, max_value=3),
        st.booleans(),
    )
    def test_command_always_within_bounds(self, raw_tracks, ego_speed, set_speed, emergency):
        tracks = [
            track(
                i + 1,
                x,
                y,
                vx,
                cls=ObjectClass.VEHICLE if is_vehicle else ObjectClass.OBSTACLE,
            )
            for i, (x, y, vx, is_vehicle) in enumerate(raw_tracks)
        ]
        state = AccState(enabled=True, set_speed=set_speed, emergency=emergency)
        command, _ = acc_step(state, tracks, ego(speed=ego_speed), AccParams())
        assert command is not None
        if emergency:
            assert command.speed == 0.0
        else:
            assert 0.0 <= command.speed <= set_speed


class TestProjectPath:
    def test_straight(self):
        points = project_path(ego(steering=0.0))
        assert len(points) == 20
        assert points[0] == pytest.approx((0.1, 0.0))
        assert points[-1] == pytest.approx((2.0, 0.0))
        assert all(p[1] == 0.0 for p in points)

    def test_arc_radius_identity(self):
        steer = 0.3
        radius = WHEELBASE / math.tan(steer)
        for x, y in project_path(ego(steering=steer)):
            assert x * x + (y - radius) ** 2 == pytest.approx(radius**2, abs=1e-9)

    def test_negative_steering_mirrors(self):
        pos = project_path(ego(steering=0.3))
        neg = project_path(ego(steering=-0.3))
        for (xp, yp), (xn, yn) in zip(pos, neg):
            assert xn == pytest.approx(xp)
            assert yn == pytest.approx(-yp)

    def test_arc_length_spacing(self):
        points = project_path(ego(steering=0.2), horizon_m=2.0, n_points=20)
        prev = (0.0, 0.0)
        for p in points:
            chord = math.hypot(p[0] - prev[0], p[1] - prev[1])
            assert chord == pytest.approx(0.1, abs=1e-3)  # chord ~ arc step
            prev = p


class TestVizFrame:
    def test_vehicle_is_blue_obstacle_is_cyan(self):
        frame = build_viz_frame(
            ego(),
            [track(1, cls=ObjectClass.VEHICLE), track(2, cls=ObjectClass.OBSTACLE)],
            project_path(ego()),
            {"mean_ms": 0.0},
            AccState(enabled=True, set_speed=2.0),
        )
        colors = [t["color"] for t in frame["tracks"]]
        assert colors == ["blue", "cyan"]
        assert frame["ego"]["color"] == "green"

    def test_empty_tracks(self):
        frame = build_viz_frame(ego(), [], project_path(ego()), {}, AccState())
        assert frame["tracks"] == []
        assert len(frame["path"]) == 20


class TestStore:
    def test_sample_row_counts(self, tmp_path):
        with TelemetryStore(tmp_path / "t.sqlite") as store:
            store.collect(ego(ts=1000), [track(1), track(2)], 1000)
            store.flush()
            conn = sqlite3.connect(store.path)
            assert conn.execute("SELECT COUNT(*) FROM ego_state").fetchone()[0] == 1
            assert conn.execute("SELECT COUNT(*) FROM tracks").fetchone()[0] == 2
            conn.close()

    def test_monotone_timestamps(self, tmp_path):
        with TelemetryStore(tmp_path / "t.sqlite") as store:
            for k in range(100):
                store.collect(ego(ts=k * 100_000), [], k * 100_000)
            store.flush()
            conn = sqlite3.connect(store.path)
            stamps = [r[0] for r in conn.execute("SELECT ts_us FROM ego_state")]
            conn.close()
        assert stamps == sorted(stamps)
        assert len(set(stamps)) == 100

    def test_commands_recorded(self, tmp_path):
        with TelemetryStore(tmp_path / "t.sqlite") as store:
            store.record_command(5, "set_speed", 1.5)
            store.flush()
            conn = sqlite3.connect(store.path)
            rows = conn.execute("SELECT * FROM commands").fetchall()
            conn.close()
        assert rows == [(5, "set_speed", 1.5)]

    def test_closed_store_rejects_writes(self, tmp_path):
        store = TelemetryStore(tmp_path / "t.sqlite")
        store.close()
        with pytest.raises(RuntimeError):
            store.collect(ego(), [], 0)


class TestReport:
    def _populate(self, tmp_path, n=3):
        store = TelemetryStore(tmp_path / "t.sqlite")
        for k in range(n):
            store.collect(
                ego(speed=0.123456789 + k, ts=k * 100_000, commanded=1.5),
                [track(1, x=1.23456789)],
                k * 100_000,
            )
        store.flush()
        store.close()
        return store.path

    def test_row_counts_and_headers(self, tmp_path):
        path = self._populate(tmp_path)
        result = generate_report(path, 0, 10**9, tmp_path / "out")
        assert result["row_counts"] == {"ego": 3, "tracks": 3}
        ego_lines = open(result["ego_csv_path"]).read().splitlines()
        track_lines = open(result["tracks_csv_path"]).read().splitlines()
        assert ego_lines[0] == EGO_CSV_HEADER
        assert track_lines[0] == TRACKS_CSV_HEADER
        assert len(ego_lines) == 4

    def test_empty_interval_headers_only(self, tmp_path):
        path = self._populate(tmp_path)
        result = generate_report(path, 10**9, 2 * 10**9, tmp_path / "out")
        assert result["row_counts"] == {"ego": 0, "tracks": 0}
        assert open(result["ego_csv_path"]).read() == EGO_CSV_HEADER + "\n"

    def test_rejects_inverted_interval(self, tmp_path):
        path = self._populate(tmp_path)
        with pytest.raises(ValueError):
            generate_report(path, 10, 5, tmp_path / "out")

    def test_round_trip_six_significant_digits(self, tmp_path):
        path = self._populate(tmp_path)
        result = generate_report(path, 0, 10**9, tmp_path / "out")
        with open(result["ego_csv_path"]) as f:
            rows = list(csv.DictReader(f))
        conn = sqlite3.connect(path)
        stored = conn.execute("SELECT ts_us, speed FROM ego_state ORDER BY ts_us").fetchall()
        conn.close()
        for row, (ts, speed) in zip(rows, stored):
            assert int(row["ts_us"]) == ts
            parsed = float(row["speed_mps"])
            assert parsed == pytest.approx(speed, rel=1e-5)

    def test_lf_line_endings(self, tmp_path):
        path = self._populate(tmp_path)
        result = generate_report(path, 0, 10**9, tmp_path / "out")
        blob = open(result["ego_csv_path"], "rb").read()
        assert b"\r" not in blob

    def test_missing_store(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            generate_report(tmp_path / "absent.sqlite", 0, 1, tmp_path / "out")

    @settings(max_examples=25, deadline=None)
    @given(
        stamps=st.lists(
            st.integers(min_value=0, max_value=10**7), max_size=40, unique=True
        ),
        a=st.integers(min_value=0, max_value=10**7),
        b=st.integers(min_value=0, max_value=10**7),
    )
    def test_interval_counts_match_store(self, stamps, a, b):
        t_from, t_to = min(a, b), max(a, b)
        with tempfile.TemporaryDirectory() as tmp:
            tmp = pathlib.Path(tmp)
            store = TelemetryStore(tmp / "t.sqlite")
            for ts in sorted(stamps):
                store.collect(ego(ts=ts), [], ts)
            store.flush()
            store.close()
            result = generate_report(store.path, t_from, t_to, tmp / "out")
        assert result["row_counts"]["ego"] == sum(
            1 for ts in stamps if t_from <= ts <= t_to
        )
