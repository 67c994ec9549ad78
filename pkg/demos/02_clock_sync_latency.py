#!/usr/bin/env python3
"""Clock synchronization and latency accounting over a lossy simulated link.

A server whose clock runs 5 s ahead answers sync requests through channels
with delay and jitter. The client recovers the offset, then uses it to turn
raw timestamps into one-way latencies checked against the 100 ms budget.
"""

from acctwin.wire import (
    LatencyMonitor,
    SequenceSource,
    SimChannel,
    SimLink,
    clock_sync,
    make_time_responder,
)

TRUE_OFFSET_US = 5_000_000  # server clock leads by 5 s

# --- 1. Estimate the offset with request/response rounds ----------------------

link = SimLink(
    forward=SimChannel(base_delay_ms=20.0, jitter_ms=8.0, seed=1),
    backward=SimChannel(base_delay_ms=20.0, jitter_ms=8.0, seed=2),
)
server_clock = lambda: link.clock.now_us() + TRUE_OFFSET_US
link.responder_b = make_time_responder(link.endpoint_b(), server_clock, SequenceSource())

estimate = clock_sync(link.endpoint_a(), link.clock.now_us, n_rounds=8)
print(f"true offset      : {TRUE_OFFSET_US / 1000:.3f} ms")
print(f"estimated offset : {estimate.offset_us / 1000:.3f} ms")
print(f"estimation error : {abs(estimate.offset_us - TRUE_OFFSET_US) / 1000:.3f} ms")
print(f"best round rtt   : {estimate.rtt_us / 1000:.3f} ms over {estimate.rounds_used} rounds")
print()

# --- 2. Latency accounting with the estimated offset --------------------------

# Frames are stamped with the *server* clock; the monitor runs on the client,
# so the correction is (receiver - sender) = -offset.
monitor = LatencyMonitor()
channel = SimChannel(base_delay_ms=30.0, jitter_ms=15.0, seed=3)
clock = link.clock

for k in range(400):
    send_local = clock.now_us()
    send_stamped = send_local + TRUE_OFFSET_US  # sender stamps with its clock
    deliver_at = channel.send(b"telemetry", send_local)
    clock.advance(50_000)  # 20 Hz sender
    if deliver_at is not None:
        monitor.record(send_stamped, deliver_at, -estimate.offset_us)

stats = monitor.stats()
print("one-way latency over 400 frames (30 ms base, 15 ms jitter):")
print(f"  mean {stats['mean_ms']:.1f} ms   p95 {stats['p95_ms']:.1f} ms   "
      f"max {stats['max_ms']:.1f} ms")
print(f"  violations of the 100 ms budget: {stats['violation_count']}")
print()

# --- 3. The same link, degraded past the budget --------------------------------

slow = LatencyMonitor()
channel = SimChannel(base_delay_ms=110.0, jitter_ms=20.0, seed=4)
for k in range(100):
    send_local = clock.now_us()
    deliver_at = channel.send(b"telemetry", send_local)
    clock.advance(50_000)
    if deliver_at is not None:
        slow.record(send_local + TRUE_OFFSET_US, deliver_at, -estimate.offset_us)
print(f"degraded link (110 ms base): {slow.violation_count}/100 frames violate "
      f"the budget, p95 {slow.stats()['p95_ms']:.1f} ms")
