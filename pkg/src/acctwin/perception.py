"""On-board perception: point cloud clustering and multi-object tracking.

Raw scans become Cartesian clouds, DBSCAN groups them into clusters, and a
constant-velocity Kalman filter per object turns clusters into tracks with a
tentative/confirmed lifecycle. Everything iterates in fixed index order so
identical inputs give identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import ObjectClass, ObjectTrack, TrackLifecycle
from .ptsim import LidarConfig, LidarScan

NOISE = -1  # dbscan label for unclustered points

VEHICLE_MAX_EXTENT = 0.6   # m; larger footprints are obstacles
MIN_EXTENT = 0.05          # m floor on bounding-box extents


@dataclass(frozen=True)
class PointCloud2D:
    timestamp: int
    points: np.ndarray  # shape (n, 2), vehicle frame


@dataclass(frozen=True)
class Cluster:
    member_indices: tuple[int, ...]
    centroid: tuple[float, float]
    extent: tuple[float, float]


@dataclass(frozen=True)
class TrackerParams:
    eps: float = 0.3
    min_pts: int = 3
    gate_m: float = 0.5
    confirm_hits: int = 3
    delete_misses: int = 5
    process_noise_sigma: float = 0.5   # m/s^2 white acceleration
    meas_noise_sigma: float = 0.05     # m position measurement noise
    init_velocity_sigma: float = 1.0   # m/s prior for new tracks


def scan_to_points(scan: LidarScan, cfg: LidarConfig) -> PointCloud2D:
    """Project returning beams to Cartesian points in the vehicle frame."""
    ranges = np.asarray(scan.ranges, dtype=float)
    if ranges.shape != (cfg.beam_count,):
        raise ValueError(
            f"scan has {ranges.shape} beams, config expects {cfg.beam_count}"
        )
    angles = cfg.beam_angles()
    keep = ranges < cfg.range_max
    r = ranges[keep]
    a = angles[keep]
    points = np.column_stack((r * np.cos(a), r * np.sin(a)))
    return PointCloud2D(timestamp=scan.timestamp, points=points)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering with deterministic index-order expansion.

    Neighborhoods are closed balls (<= eps) including the point itself.
    Border points reachable from several clusters go to the cluster
    discovered first. Returns one label per point; -1 marks noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    visited = np.zeros(n, dtype=bool)

    def neighbors_of(i: int) -> np.ndarray:
        d = np.linalg.norm(pts - pts[i], axis=1)
        return np.flatnonzero(d <= eps)

    cluster_id = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        seeds = neighbors_of(i)
        if len(seeds) < min_pts:
            continue  # provisional noise; a later cluster may still claim i
        labels[i] = cluster_id
        queue = [j for j in seeds if j != i]
        k = 0
        while k < len(queue):
            j = queue[k]
            k += 1
            if labels[j] == NOISE:
                labels[j] = cluster_id
            if not visited[j]:
                visited[j] = True
                j_neighbors = neighbors_of(j)
                if len(j_neighbors) >= min_pts:
                    labels[j] = cluster_id
                    queue.extend(m for m in j_neighbors if not visited[m] or labels[m] == NOISE)
        cluster_id += 1
    return labels


def cluster_summary(points: np.ndarray, labels: np.ndarray) -> list[Cluster]:
    """Centroid and bounding-box extent per cluster, ordered by cluster id."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    labels = np.asarray(labels)
    clusters = []
    for cid in sorted(set(labels[labels != NOISE].tolist())):
        members = np.flatnonzero(labels == cid)
        member_pts = pts[members]
        centroid = member_pts.mean(axis=0)
        span = member_pts.max(axis=0) - member_pts.min(axis=0)
        clusters.append(
            Cluster(
                member_indices=tuple(int(m) for m in members),
                centroid=(float(centroid[0]), float(centroid[1])),
                extent=(
                    max(float(span[0]), MIN_EXTENT),
                    max(float(span[1]), MIN_EXTENT),
                ),
            )
        )
    return clusters


def classify_cluster(extent: tuple[float, float]) -> ObjectClass:
    """Small footprints read as vehicles, larger ones as obstacles."""
    if extent[0] <= 0 or extent[1] <= 0:
        raise ValueError("extent must be positive")
    return ObjectClass.VEHICLE if max(extent) <= VEHICLE_MAX_EXTENT else ObjectClass.OBSTACLE


# -- Kalman filtering --------------------------------------------------------

_H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


class DegenerateUpdate(ValueError):
    """Innovation covariance was singular; the update cannot proceed."""


@dataclass
class KalmanTrack:
    """Internal per-object state: [x, y, vx, vy] mean plus covariance."""

    id: int
    mean: np.ndarray
    cov: np.ndarray
    extent: tuple[float, float]
    hits: int = 1
    misses: int = 0
    lifecycle: TrackLifecycle = TrackLifecycle.TENTATIVE

    def snapshot(self) -> ObjectTrack:
        return ObjectTrack(
            id=self.id,
            x=float(self.mean[0]),
            y=float(self.mean[1]),
            vx=float(self.mean[2]),
            vy=float(self.mean[3]),
            length=self.extent[0],
            width=self.extent[1],
            object_class=classify_cluster(self.extent),
            lifecycle=self.lifecycle,
            hits=self.hits,
            misses=self.misses,
        )


def kf_predict(track: KalmanTrack, dt: float, sigma_a: float) -> None:
    """Constant-velocity prediction with white-acceleration process noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = np.array(
        [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    q1 = dt**4 / 4.0
    q2 = dt**3 / 2.0
    q3 = dt**2
    q = sigma_a**2 * np.array(
        [
            [q1, 0.0, q2, 0.0],
            [0.0, q1, 0.0, q2],
            [q2, 0.0, q3, 0.0],
            [0.0, q2, 0.0, q3],
        ]
    )
    track.mean = f @ track.mean
    track.cov = f @ track.cov @ f.T + q


def kf_update(track: KalmanTrack, measurement: np.ndarray, sigma_m: float) -> None:
    """Standard position update; posterior covariance is re-symmetrized."""
    z = np.asarray(measurement, dtype=float)
    r = sigma_m**2 * np.eye(2)
    s = _H @ track.cov @ _H.T + r
    det = np.linalg.det(s)
    if not np.isfinite(det) or abs(det) < 1e-300:
        raise DegenerateUpdate(f"singular innovation covariance (det={det})")
    gain = track.cov @ _H.T @ np.linalg.inv(s)
    innovation = z - _H @ track.mean
    track.mean = track.mean + gain @ innovation
    cov = (np.eye(4) - gain @ _H) @ track.cov
    track.cov = (cov + cov.T) / 2.0


class Tracker:
    """Greedy nearest-neighbor multi-object tracker over cluster centroids."""

    def __init__(self, params: TrackerParams | None = None) -> None:
        self.params = params or TrackerParams()
        self.tracks: list[KalmanTrack] = []
        self.next_id = 1
        self.last_timestamp: int | None = None

    def step(self, clusters: list[Cluster], timestamp: int) -> list[ObjectTrack]:
        """Advance one perception cycle; returns confirmed tracks only."""
        p = self.params
        if self.last_timestamp is not None:
            if timestamp < self.last_timestamp:
                raise ValueError("timestamps must be non-decreasing")
            dt = (timestamp - self.last_timestamp) / 1e6
            if dt > 0:
                for track in self.tracks:
                    kf_predict(track, dt, p.process_noise_sigma)
        self.last_timestamp = timestamp

        # Greedy association: globally ascending distance, one use per side.
        pairs = []
        for ti, track in enumerate(self.tracks):
            for ci, cluster in enumerate(clusters):
                d = float(
                    np.hypot(
                        track.mean[0] - cluster.centroid[0],
                        track.mean[1] - cluster.centroid[1],
                    )
                )
                if d <= p.gate_m:
                    pairs.append((d, ti, ci))
        pairs.sort()
        matched_tracks: set[int] = set()
        matched_clusters: set[int] = set()
        for d, ti, ci in pairs:
            if ti in matched_tracks or ci in matched_clusters:
                continue
            matched_tracks.add(ti)
            matched_clusters.add(ci)
            track = self.tracks[ti]
            cluster = clusters[ci]
            kf_update(track, np.array(cluster.centroid), p.meas_noise_sigma)
            track.extent = cluster.extent
            track.hits += 1
            track.misses = 0
            if track.hits >= p.confirm_hits:
                track.lifecycle = TrackLifecycle.CONFIRMED

        survivors = []
        for ti, track in enumerate(self.tracks):
            if ti in matched_tracks:
                survivors.append(track)
                continue
            track.misses += 1
            if track.misses < p.delete_misses:
                survivors.append(track)
        self.tracks = survivors

        for ci, cluster in enumerate(clusters):
            if ci in matched_clusters:
                continue
            mean = np.array([cluster.centroid[0], cluster.centroid[1], 0.0, 0.0])
            cov = np.diag(
                [
                    p.meas_noise_sigma**2,
                    p.meas_noise_sigma**2,
                    p.init_velocity_sigma**2,
                    p.init_velocity_sigma**2,
                ]
            )
            fresh = KalmanTrack(
                id=self.next_id,
                mean=mean,
                cov=cov,
                extent=cluster.extent,
            )
            if fresh.hits >= p.confirm_hits:
                fresh.lifecycle = TrackLifecycle.CONFIRMED
            self.tracks.append(fresh)
            self.next_id += 1

        return [
            t.snapshot() for t in self.tracks if t.lifecycle is TrackLifecycle.CONFIRMED
        ]
