"""Turn a window of saliency feature vectors and rough gaze samples into a correction vector."""

from __future__ import annotations

import csv
import enum
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _graph_components

from vgaze.heatmap import FeatureVector

DEFAULT_ALPHA = 3.0
DEFAULT_EPSILON = 0.1

Point = tuple[float, float]


class TransformSource(enum.Enum):
    SCENE_CUT = "SceneCut"
    HEAD_MOVE = "HeadMove"
    INITIAL = "Initial"


@dataclass(frozen=True)
class RoughGazeSample:
    """Uncalibrated gaze estimate in normalized screen units (bottom-left origin)."""

    timestamp_ms: float
    frame_index: int
    position: Point

    def __post_init__(self) -> None:
        x, y = self.position
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError(f"gaze sample at {self.timestamp_ms} ms has non-finite position {self.position}")
        object.__setattr__(self, "position", (float(x), float(y)))


@dataclass(frozen=True)
class FrameAveragedGaze:
    frame_index: int
    position: Point
    sample_count: int


@dataclass(frozen=True)
class TransformVector:
    """Screen-space correction; calibrated gaze = rough + (dx, dy)."""

    dx: float
    dy: float
    computed_at_ms: float = 0.0
    source: TransformSource = TransformSource.INITIAL

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError("transform vector must be finite")


IDENTITY = TransformVector(0.0, 0.0)


@dataclass(frozen=True)
class Cluster:
    members: tuple[int, ...]
    centroid: Point

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class HistoricalTrajectories:
    """Past users' gaze points keyed by frame index."""

    points: dict[int, tuple[Point, ...]] = field(default_factory=dict)

    @property
    def user_count(self) -> int:
        return max((len(p) for p in self.points.values()), default=0)

    def for_frame(self, frame_index: int) -> tuple[Point, ...]:
        return self.points.get(frame_index, ())

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, int, float, float]]) -> "HistoricalTrajectories":
        grouped: dict[int, list[tuple[str, Point]]] = defaultdict(list)
        for user, frame, x, y in rows:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"non-finite historical point for user {user} frame {frame}")
            grouped[int(frame)].append((str(user), (float(x), float(y))))
        return cls({f: tuple(p for _, p in sorted(pts, key=lambda up: up[0])) for f, pts in grouped.items()})


def load_history(path: str | os.PathLike) -> HistoricalTrajectories:
    """Read a ``user_id,frame_index,x,y`` CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"user_id", "frame_index", "x", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: history CSV is missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append((row["user_id"], int(row["frame_index"]), float(row["x"]), float(row["y"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
    return HistoricalTrajectories.from_rows(rows)


def zscore_filter(samples: Sequence[RoughGazeSample], alpha: float = DEFAULT_ALPHA) -> list[RoughGazeSample]:
    """Drop blink-like outliers whose per-axis |z| exceeds ``alpha``.

    Uses the population standard deviation over the whole window. An axis
    with zero spread flags nothing.
    """
    if not samples:
        return []
    pos = np.array([s.position for s in samples], dtype=np.float64)
    mu = pos.mean(axis=0)
    sigma = pos.std(axis=0)
    keep = np.ones(len(samples), dtype=bool)
    for axis in (0, 1):
        if sigma[axis] > 0:
            keep &= np.abs((pos[:, axis] - mu[axis]) / sigma[axis]) <= alpha
    return [s for s, k in zip(samples, keep) if k]


def average_per_frame(samples: Iterable[RoughGazeSample]) -> list[FrameAveragedGaze]:
    groups: dict[int, list[Point]] = defaultdict(list)
    for s in samples:
        groups[s.frame_index].append(s.position)
    out = []
    for frame_index in sorted(groups):
        pts = np.array(groups[frame_index], dtype=np.float64)
        mx, my = pts.mean(axis=0)
        out.append(FrameAveragedGaze(frame_index, (float(mx), float(my)), len(pts)))
    return out


def cluster_points(points: Sequence[Point], epsilon: float = DEFAULT_EPSILON, min_size: int = 1) -> list[Cluster]:
    """Radius-graph density clustering.

    Two points are neighbours when their Euclidean distance is at most
    ``epsilon``; clusters are the connected components of that graph. Clusters
    with fewer than ``min_size`` members are dropped. Output is ordered by
    size (largest first), then by smallest member index.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if len(points) == 0:
        return []
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("cannot cluster non-finite points")
    dx = pts[:, 0][:, None] - pts[:, 0][None, :]
    dy = pts[:, 1][:, None] - pts[:, 1][None, :]
    adjacency = csr_matrix(dx * dx + dy * dy <= epsilon * epsilon)
    _, labels = _graph_components(adjacency, directed=False)

    clusters = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        if len(members) < min_size:
            continue
        cx, cy = pts[members].mean(axis=0)
        clusters.append(Cluster(tuple(int(m) for m in members), (float(cx), float(cy))))
    clusters.sort(key=lambda c: (-c.size, c.members[0]))
    return clusters


def default_min_size(window_len: int) -> int:
    return max(1, math.ceil(window_len / 3))


def compute_transform(
    vectors: Sequence[FeatureVector],
    gazes: Sequence[FrameAveragedGaze],
    epsilon: float = DEFAULT_EPSILON,
    min_size: int | None = None,
    computed_at_ms: float = 0.0,
    source: TransformSource = TransformSource.INITIAL,
) -> TransformVector | None:
    """Offset between the dominant saliency cluster and the dominant gaze cluster.

    Returns None (defer) when either side has no cluster of at least
    ``min_size`` members.
    """
    if min_size is None:
        min_size = default_min_size(len(vectors))
    pool = [p for v in sorted(vectors, key=lambda v: v.frame_index) for p in v.points]
    gaze_pts = [g.position for g in sorted(gazes, key=lambda g: g.frame_index)]
    sal_clusters = cluster_points(pool, epsilon, min_size)
    gaze_clusters = cluster_points(gaze_pts, epsilon, min_size)
    if not sal_clusters or not gaze_clusters:
        return None
    (sx, sy), (gx, gy) = sal_clusters[0].centroid, gaze_clusters[0].centroid
    return TransformVector(sx - gx, sy - gy, computed_at_ms, source)


def merge_historical(vector: FeatureVector, hist: HistoricalTrajectories | None) -> FeatureVector:
    """Append past users' gaze points for this frame; they count like detected peaks."""
    if hist is None:
        return vector
    extra = hist.for_frame(vector.frame_index)
    if not extra:
        return vector
    return replace(vector, historical_points=vector.historical_points + tuple(extra))


@dataclass(frozen=True)
class WindowResult:
    transform: TransformVector | None
    usable_frames: int
    kept_samples: int


def calibrate_window(
    vectors: Sequence[FeatureVector],
    samples: Sequence[RoughGazeSample],
    target_len: int,
    *,
    alpha: float = DEFAULT_ALPHA,
    use_zscore: bool = True,
    epsilon: float = DEFAULT_EPSILON,
    min_size: int | None = None,
    computed_at_ms: float = 0.0,
    source: TransformSource = TransformSource.INITIAL,
) -> WindowResult:
    """Filter, average and cluster one window.

    Frames that lose every sample to the outlier filter are dropped; if fewer
    than ``target_len`` frames remain the window defers.
    """
    by_frame = {v.frame_index: v for v in vectors}
    samples = [s for s in samples if s.frame_index in by_frame]
    kept = zscore_filter(samples, alpha) if use_zscore else list(samples)
    gazes = average_per_frame(kept)
    usable = [by_frame[g.frame_index] for g in gazes]
    if len(usable) < target_len:
        return WindowResult(None, len(usable), len(kept))
    if min_size is None:
        min_size = default_min_size(target_len)
    vc = compute_transform(usable, gazes, epsilon, min_size, computed_at_ms, source)
    return WindowResult(vc, len(usable), len(kept))


@dataclass
class CalibrationWindow:
    """A batch of accepted frames and their gaze samples awaiting calibration.

    ``saliency`` is fixed when the window opens (``"BottomUp"`` or ``"TopDown"``).
    """

    trigger: TransformSource
    target_len: int
    saliency: str
    opened_at_ms: float
    vectors: dict[int, FeatureVector] = field(default_factory=dict)
    samples: list[RoughGazeSample] = field(default_factory=list)
    frames_seen: int = 0

    @property
    def full(self) -> bool:
        return len(self.vectors) >= self.target_len

    def clear(self) -> None:
        self.vectors.clear()
        self.samples.clear()
        self.frames_seen = 0
