import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acctwin.domain import ObjectClass, ObjectTrack, TrackLifecycle
from acctwin import wire
from acctwin.wire import (
    BadMagic,
    ClockOffset,
    LatencyMonitor,
    MessageEnvelope,
    SequenceSource,
    SimChannel,
    SimLink,
    SyncFailed,
    TruncatedFrame,
    UnknownType,
    VirtualClock,
    clock_sync,
    decode_message,
    encode_message,
    make_time_responder,
)

GOLDEN_TIME_REQ = bytes.fromhex(
    "44 54 30 31 01 04 00 00 00 00 00 00 00 00 00 00 00 00 00 00".replace(" ", "")
)


def envelopes() -> st.SearchStrategy[MessageEnvelope]:
    return st.builds(
        MessageEnvelope,
        msg_type=st.sampled_from(sorted(wire._KNOWN_TYPES)),
        sequence=st.integers(min_value=0, max_value=2**32 - 1),
        send_timestamp=st.integers(min_value=0, max_value=2**64 - 1),
        payload=st.binary(max_size=256),
    )


class TestFraming:
    def test_golden_time_req(self):
        env = MessageEnvelope(msg_type=wire.MSG_TIME_REQ, sequence=0, send_timestamp=0)
        assert encode_message(env) == GOLDEN_TIME_REQ

    def test_golden_time_req_decodes(self):
        env = decode_message(GOLDEN_TIME_REQ)
        assert env.msg_type == wire.MSG_TIME_REQ
        assert env.sequence == 0
        assert env.payload == b""

    def test_golden_speed_cmd_payload(self):
        # IEEE-754 little-endian 1.5 is 00 00 C0 3F; flags byte 0 follows.
        assert wire.pack_speed_cmd(1.5, emergency=False) == bytes.fromhex("0000c03f00")

    @given(envelopes())
    def test_round_trip(self, env):
        assert decode_message(encode_message(env)) == env

    def test_bad_magic_on_corrupt_first_byte(self):
        frame = bytearray(GOLDEN_TIME_REQ)
        frame[0] ^= 0xFF
        with pytest.raises(BadMagic):
            decode_message(bytes(frame))

    def test_bad_version(self):
        frame = bytearray(GOLDEN_TIME_REQ)
        frame[4] = 2
        with pytest.raises(BadMagic):
            decode_message(bytes(frame))

    def test_unknown_type(self):
        frame = bytearray(GOLDEN_TIME_REQ)
        frame[5] = 0x7F
        with pytest.raises(UnknownType):
            decode_message(bytes(frame))

    def test_truncated_short_frame(self):
        with pytest.raises(TruncatedFrame):
            decode_message(GOLDEN_TIME_REQ[:10])

    def test_truncated_payload(self):
        frame = bytearray(GOLDEN_TIME_REQ)
        frame[6] = 10  # header claims 10 payload bytes
        frame = bytes(frame) + b"\x00\x00\x00\x00"
        with pytest.raises(TruncatedFrame):
            decode_message(frame)

    def test_trailing_garbage_rejected(self):
        with pytest.raises(TruncatedFrame):
            decode_message(GOLDEN_TIME_REQ + b"x")

    def test_oversized_payload_rejected(self):
        with pytest.raises(ValueError):
            MessageEnvelope(
                msg_type=wire.MSG_TRACKS,
                sequence=0,
                send_timestamp=0,
                payload=b"\x00" * 65536,
            )

    @given(st.binary(max_size=64))
    def test_decoder_is_total(self, blob):
        try:
            decode_message(blob)
        except (BadMagic, UnknownType, TruncatedFrame):
            pass

    @given(st.binary(min_size=1, max_size=40), st.integers(0, 19))
    def test_decoder_total_on_mutated_golden(self, junk, cut):
        frame = GOLDEN_TIME_REQ[:cut] + junk
        try:
            decode_message(frame)
        except (BadMagic, UnknownType, TruncatedFrame):
            pass


class TestPayloadCodecs:
    def test_ego_round_trip(self):
        payload = wire.pack_ego_state(1.25, -0.125)
        assert wire.unpack_ego_state(payload) == (1.25, -0.125)

    def test_speed_cmd_round_trip(self):
        speed, emergency = wire.unpack_speed_cmd(wire.pack_speed_cmd(0.75, True))
        assert speed == 0.75 and emergency is True

    def test_time_resp_round_trip(self):
        assert wire.unpack_time_resp(wire.pack_time_resp(123, 456)) == (123, 456)

    def test_tracks_round_trip(self):
        tracks = [
            ObjectTrack(
                id=7,
                x=1.5,
                y=-0.25,
                vx=0.5,
                vy=0.0,
                length=0.25,
                width=0.125,
                object_class=ObjectClass.VEHICLE,
                lifecycle=TrackLifecycle.CONFIRMED,
            ),
            ObjectTrack(
                id=9,
                x=3.0,
                y=1.0,
                vx=-1.0,
                vy=0.25,
                length=1.5,
                width=0.75,
                object_class=ObjectClass.OBSTACLE,
                lifecycle=TrackLifecycle.TENTATIVE,
            ),
        ]
        decoded = wire.unpack_tracks(wire.pack_tracks(tracks))
        assert [t.id for t in decoded] == [7, 9]
        assert decoded[0].object_class is ObjectClass.VEHICLE
        assert decoded[1].lifecycle is TrackLifecycle.TENTATIVE
        # f32 payload stores these binary fractions exactly
        assert decoded[0].x == 1.5 and decoded[1].width == 0.75

    def test_tracks_record_size(self):
        one = wire.pack_tracks(
            [
                ObjectTrack(
                    id=1,
                    x=0.0,
                    y=0.0,
                    vx=0.0,
                    vy=0.0,
                    length=0.1,
                    width=0.1,
                    object_class=ObjectClass.VEHICLE,
                    lifecycle=TrackLifecycle.TENTATIVE,
                )
            ]
        )
        assert len(one) == 2 + 30


class TestSequences:
    def test_source_is_per_type(self):
        src = SequenceSource()
        assert [src.next(1), src.next(1), src.next(2)] == [0, 1, 0]

    def test_tracker_counts_gaps(self):
        tracker = wire.SequenceTracker()
        for seq in (0, 1, 4, 5):
            tracker.observe(1, seq)
        assert tracker.gaps == 2


class TestLatencyMonitor:
    def test_ten_ms_sample_no_violation(self):
        mon = LatencyMonitor()
        assert mon.record(0, 10_000) == pytest.approx(10.0)
        assert mon.violation_count == 0

    def test_violation_counted(self):
        mon = LatencyMonitor()
        mon.record(0, 150_000)
        assert mon.violation_count == 1

    def test_mean_and_max(self):
        mon = LatencyMonitor()
        for ms in (10, 20, 30):
            mon.record(0, ms * 1000)
        stats = mon.stats()
        assert stats["mean_ms"] == pytest.approx(20.0)
        assert stats["max_ms"] == pytest.approx(30.0)

    def test_empty_stats(self):
        stats = LatencyMonitor().stats()
        assert stats == {
            "count": 0,
            "mean_ms": 0.0,
            "p95_ms": 0.0,
            "max_ms": 0.0,
            "violation_count": 0,
        }

    def test_p95_uniform(self):
        mon = LatencyMonitor()
        for _ in range(100):
            mon.record(0, 10_000)
        assert mon.stats()["p95_ms"] == pytest.approx(10.0)

    def test_p95_nearest_rank(self):
        # nearest-rank: ceil(0.95 * 100) = 95th smallest of 1..100 ms
        mon = LatencyMonitor()
        for ms in range(1, 101):
            mon.record(0, ms * 1000)
        assert mon.stats()["p95_ms"] == pytest.approx(95.0)

    def test_negative_latency_clamped_and_flagged(self):
        mon = LatencyMonitor()
        assert mon.record(10_000, 5_000) == 0.0
        assert mon.clock_skew_events == 1

    @given(st.lists(st.integers(min_value=0, max_value=400_000), max_size=300))
    def test_violation_count_matches_definition(self, deltas):
        mon = LatencyMonitor()
        for d in deltas:
            mon.record(0, d)
        assert mon.violation_count == sum(1 for d in deltas if d / 1000.0 > 100.0)


class TestSimChannel:
    def test_exact_delay(self):
        ch = SimChannel(base_delay_ms=20.0)
        ch.send(b"x", now_us=0)
        assert ch.poll(19_999) == []
        assert ch.poll(20_000) == [b"x"]

    def test_drop_all(self):
        ch = SimChannel(drop_probability=1.0)
        assert ch.send(b"x", 0) is None
        assert ch.poll(10**9) == []
        assert ch.dropped == 1

    def test_deterministic_schedule(self):
        def schedule():
            ch = SimChannel(base_delay_ms=5.0, jitter_ms=3.0, drop_probability=0.3, seed=42)
            return [ch.send(bytes([i]), now_us=i * 1000) for i in range(200)]

        assert schedule() == schedule()

    def test_delivery_order_is_schedule_order(self):
        ch = SimChannel(base_delay_ms=1.0, jitter_ms=5.0, seed=7)
        for i in range(50):
            ch.send(bytes([i]), now_us=0)
        delivered = ch.poll(10_000_000)
        assert len(delivered) == 50


class _ScriptedClock:
    """Clock that jumps to scripted instants as the transport delivers."""

    def __init__(self, start: int) -> None:
        self.now = start

    def __call__(self) -> int:
        return self.now


class _ScriptedTransport(wire.Transport):
    """Returns one canned TIME_RESP and advances the clock to t3."""

    def __init__(self, clock: _ScriptedClock, t1: int, t2: int, t3: int) -> None:
        self.clock = clock
        self.response = encode_message(
            MessageEnvelope(
                msg_type=wire.MSG_TIME_RESP,
                sequence=0,
                send_timestamp=t2,
                payload=wire.pack_time_resp(t1, t2),
            )
        )
        self.t3 = t3

    def send(self, frame: bytes) -> None:
        pass

    def recv(self, timeout_s: float = 0.0):
        self.clock.now = self.t3
        return self.response


class TestClockSync:
    def test_symmetric_model_algebra(self):
        # t0=1000, t1=1500, t2=1510, t3=1030: delay 10 each way, offset 490.
        clock = _ScriptedClock(1000)
        transport = _ScriptedTransport(clock, t1=1500, t2=1510, t3=1030)
        result = clock_sync(transport, clock, n_rounds=1)
        assert result.offset_us == 490
        assert result.rtt_us == 20
        assert result.rounds_used == 1

    def _linked_sync(
        self,
        offset_us: int,
        fwd_delay_ms: float,
        back_delay_ms: float,
        fwd_jitter_ms: float = 0.0,
        back_jitter_ms: float = 0.0,
        n_rounds: int = 8,
    ) -> ClockOffset:
        link = SimLink(
            forward=SimChannel(fwd_delay_ms, fwd_jitter_ms, seed=1),
            backward=SimChannel(back_delay_ms, back_jitter_ms, seed=2),
        )
        server = link.endpoint_b()
        server_clock = lambda: link.clock.now_us() + offset_us
        link.responder_b = make_time_responder(server, server_clock, SequenceSource())
        client = link.endpoint_a()
        return clock_sync(client, link.clock.now_us, n_rounds=n_rounds)

    def test_zero_delay_equal_clocks(self):
        result = self._linked_sync(offset_us=0, fwd_delay_ms=0, back_delay_ms=0)
        assert result.offset_us == 0

    def test_symmetric_delay_cancels(self):
        result = self._linked_sync(offset_us=490, fwd_delay_ms=10, back_delay_ms=10)
        assert abs(result.offset_us - 490) <= 1

    def test_injected_five_second_offset(self):
        result = self._linked_sync(
            offset_us=5_000_000, fwd_delay_ms=20, back_delay_ms=20
        )
        assert abs(result.offset_us - 5_000_000) <= 1000  # within 1 ms

    def test_asymmetric_delay_error_bound(self):
        d_fwd, d_back = 30.0, 10.0
        result = self._linked_sync(offset_us=0, fwd_delay_ms=d_fwd, back_delay_ms=d_back)
        bound_us = abs(d_fwd - d_back) / 2 * 1000
        assert abs(result.offset_us) <= bound_us + 1

    def test_asymmetric_jitter_stays_within_budget(self):
        result = self._linked_sync(
            offset_us=2_000_000,
            fwd_delay_ms=10,
            back_delay_ms=10,
            fwd_jitter_ms=40.0,
            back_jitter_ms=0.0,
        )
        assert abs(result.offset_us - 2_000_000) <= 100_000  # 100 ms accuracy

    def test_sync_failed_when_peer_silent(self):
        link = SimLink(forward=SimChannel(), backward=SimChannel())
        client = link.endpoint_a()  # no responder on side b
        with pytest.raises(SyncFailed):
            clock_sync(client, link.clock.now_us, n_rounds=2, round_timeout_s=0.01)

    def test_offset_validation(self):
        with pytest.raises(ValueError):
            ClockOffset(offset_us=0, rtt_us=-1, rounds_used=1)
        with pytest.raises(ValueError):
            ClockOffset(offset_us=0, rtt_us=0, rounds_used=0)
