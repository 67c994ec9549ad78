"""Digital-twin system for adaptive cruise control of a 1/10-scale vehicle.

Subpackages by responsibility:

    domain      shared value types, angle/clamp helpers
    wire        binary framing, UDP and simulated transports, clock sync,
                latency monitoring
    ptsim       vehicle plant, scripted lead, simulated LiDAR, scenarios
    perception  DBSCAN clustering and Kalman multi-object tracking
    dtentity    offloaded ACC, telemetry storage, CSV reporting
    gateway     HTTP/WebSocket bridge between the twin and the cockpit
    runner      entity loops: combined simulation or split UDP deployment
    cli         `acctwin` command-line entry point
"""

__version__ = "0.1.0"
