"""The live tracker: calibrated emission plus opportunistic recalibration.

A :class:`Session` consumes one merged, timestamp-ordered stream of frame,
gaze and head-pose events. Every gaze sample is emitted immediately with
the current transform applied. Calibration windows open at session start,
on head movement and on detected scene cuts.
"""

from __future__ import annotations

import enum
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

from vgaze.calibration import (
    CalibrationWindow,
    HistoricalTrajectories,
    RoughGazeSample,
    TransformSource,
    TransformVector,
    calibrate_window,
    merge_historical,
)
from vgaze.config import RunConfig
from vgaze.heatmap import (
    FeatureVector,
    Frame,
    SaliencyDetector,
    SaliencyHeatmap,
    downscale,
    pixel_to_screen,
    score_heatmap,
    spectral_residual_saliency,
)
from vgaze.temporal import Attention, AttentionMode, AttentionScheduler

Point = tuple[float, float]


class ProtocolError(RuntimeError):
    """Events arrived out of timestamp order."""


class Orientation(enum.Enum):
    PORTRAIT = "Portrait"
    LANDSCAPE_LEFT = "LandscapeLeft"
    LANDSCAPE_RIGHT = "LandscapeRight"


@dataclass(frozen=True)
class HeadPose:
    """Face posture features; the simulator emits 3 position + 3 orientation components."""

    timestamp_ms: float
    pose: tuple[float, ...]
    face_rotation_deg: float = 0.0

    def __post_init__(self) -> None:
        pose = tuple(float(v) for v in self.pose)
        if not pose or not all(math.isfinite(v) for v in pose):
            raise ValueError(f"head pose at {self.timestamp_ms} ms must be a non-empty finite vector")
        object.__setattr__(self, "pose", pose)


@dataclass(frozen=True)
class FrameArrived:
    frame: Frame
    external_heatmap: SaliencyHeatmap | None = None

    @property
    def timestamp_ms(self) -> float:
        return self.frame.timestamp_ms


@dataclass(frozen=True)
class GazeSample:
    sample: RoughGazeSample

    @property
    def timestamp_ms(self) -> float:
        return self.sample.timestamp_ms


@dataclass(frozen=True)
class PoseSample:
    pose: HeadPose

    @property
    def timestamp_ms(self) -> float:
        return self.pose.timestamp_ms


Event = Union[FrameArrived, GazeSample, PoseSample]


@dataclass(frozen=True)
class CalibratedGaze:
    t_ms: float
    frame: int
    x: float
    y: float
    calibrated: bool


@dataclass(frozen=True)
class SelectionRecord:
    t_ms: float
    frame: int
    scs: float
    accepted: bool
    saliency: str


@dataclass(frozen=True)
class WindowEvent:
    """``action`` is one of opened, restarted, skipped, reset, closed."""

    t_ms: float
    frame: int | None
    action: str
    trigger: TransformSource
    target_len: int
    saliency: str


@dataclass
class StepOutput:
    gazes: list[CalibratedGaze] = field(default_factory=list)
    transform: TransformVector | None = None
    selections: list[SelectionRecord] = field(default_factory=list)
    windows: list[WindowEvent] = field(default_factory=list)


def apply_transform(rough: RoughGazeSample | Point, t: TransformVector) -> Point:
    x, y = rough.position if isinstance(rough, RoughGazeSample) else rough
    return (x + t.dx, y + t.dy)


def head_movement_detect(prev: HeadPose, cur: HeadPose, threshold: float = 0.005) -> bool:
    """True iff the Euclidean pose distance strictly exceeds ``threshold``."""
    if len(prev.pose) != len(cur.pose):
        raise ValueError(f"pose dimension mismatch: {len(prev.pose)} vs {len(cur.pose)}")
    return math.dist(prev.pose, cur.pose) > threshold


def landscape_compensate(
    gaze: Point,
    face_rotation_deg: float,
    orientation: Orientation,
    kx: float = 0.002,
    y_floor: float = 0.3,
    cy: float = 0.03,
) -> Point:
    """Correct landscape-posture distortion.

    x shrinks in proportion to both the face rotation and x itself (the sign
    flips for right-hand landscape); y gets a constant lift below ``y_floor``.
    """
    if orientation is Orientation.PORTRAIT:
        return gaze
    x, y = gaze
    sign = 1.0 if orientation is Orientation.LANDSCAPE_LEFT else -1.0
    x = x - sign * kx * face_rotation_deg * x
    if y < y_floor:
        y = y + cy
    return (x, y)


_TIMING_KEYS = ("scene_cut", "bottom_up", "top_down", "selection", "calibration", "compensation")


class Session:
    """Single-writer state machine driving calibration.

    Args:
        config: Tunables; ``bottom_up_ms`` must already be resolved.
        detector: Bottom-up saliency detector run on working-resolution frames.
        history: Optional past-user gaze points merged into feature vectors.
    """

    def __init__(
        self,
        config: RunConfig | None = None,
        detector: SaliencyDetector = spectral_residual_saliency,
        history: HistoricalTrajectories | None = None,
    ) -> None:
        self.config = config or RunConfig()
        self.detector = detector
        self.history = history
        self.orientation = Orientation(self.config.orientation)
        self.scheduler = AttentionScheduler(
            self.config.bottom_up_frames, self.config.cut_hash_threshold, self.config.every_frame_is_key
        )
        self.current_transform: TransformVector | None = None
        self.transforms: list[TransformVector] = []
        self.window_log: list[WindowEvent] = []
        self.window: CalibrationWindow | None = None
        self.last_pose: HeadPose | None = None
        # frames left in the bottom-up period a head movement joined; cuts among them open no window
        self.skip_frames = 0
        self._last_t = -math.inf
        self._last_frame: int | None = None
        self._timings: dict[str, list[float]] = {k: [0.0, 0] for k in _TIMING_KEYS}
        self._out: StepOutput | None = None
        # window changes logged outside a step go out with the next step
        self._pending: list[WindowEvent] = []
        self._open_window(TransformSource.INITIAL, self.config.window_n, self.attention.mode.value, 0.0, None)

    @property
    def attention(self) -> AttentionMode:
        return self.scheduler.mode

    @property
    def timings(self) -> dict[str, dict[str, float]]:
        """Per-module wall time: total and mean milliseconds per call."""
        return {
            k: {"calls": int(n), "total_ms": tot * 1e3, "mean_ms": (tot * 1e3 / n) if n else 0.0}
            for k, (tot, n) in self._timings.items()
        }

    @contextmanager
    def _timed(self, key: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            slot = self._timings[key]
            slot[0] += time.perf_counter() - start
            slot[1] += 1

    def _log_window(self, action: str, t_ms: float, frame: int | None, window: CalibrationWindow) -> None:
        ev = WindowEvent(t_ms, frame, action, window.trigger, window.target_len, window.saliency)
        self.window_log.append(ev)
        if self._out is not None:
            self._out.windows.append(ev)
        else:
            self._pending.append(ev)

    def _begin(self) -> StepOutput:
        self._out = out = StepOutput(windows=self._pending)
        self._pending = []
        return out

    def _open_window(
        self, trigger: TransformSource, target_len: int, saliency: str, t_ms: float, frame: int | None
    ) -> None:
        action = "restarted" if self.window is not None else "opened"
        self.window = CalibrationWindow(trigger, target_len, saliency, t_ms)
        self._log_window(action, t_ms, frame, self.window)

    def step(self, event: Event) -> StepOutput:
        t = event.timestamp_ms
        if t < self._last_t:
            raise ProtocolError(f"event at {t} ms arrived after {self._last_t} ms")
        self._last_t = t
        out = self._begin()
        try:
            if isinstance(event, PoseSample):
                self._on_pose(event.pose)
            elif isinstance(event, FrameArrived):
                self._on_frame(event.frame, event.external_heatmap)
            elif isinstance(event, GazeSample):
                self._on_gaze(event.sample)
            else:
                raise TypeError(f"unknown event type {type(event).__name__}")
        finally:
            self._out = None
        return out

    def finish(self) -> StepOutput:
        """Flush a window whose last frame's samples have all arrived."""
        out = self._begin()
        try:
            self._try_calibrate(self._last_t)
        finally:
            self._out = None
        return out

    def _on_pose(self, pose: HeadPose) -> None:
        prev, self.last_pose = self.last_pose, pose
        if prev is None or not self.config.recalibration:
            return
        if not head_movement_detect(prev, pose, self.config.head_move_threshold):
            return
        mode = self.attention.mode
        if mode is Attention.BOTTOM_UP:
            # the movement piggybacks on the cut's bottom-up period; cut recalibrations in it are skipped
            self.skip_frames = self.scheduler.bottom_up_window - 1 - self.scheduler.since_cut
        self._open_window(TransformSource.HEAD_MOVE, self.config.window_n, mode.value, pose.timestamp_ms, None)

    def _on_frame(self, frame: Frame, external: SaliencyHeatmap | None) -> None:
        cfg = self.config
        t = frame.timestamp_ms
        self._try_calibrate(t)

        with self._timed("scene_cut"):
            cut = self.scheduler.observe(frame)
        skip = self.skip_frames > 0
        if skip:
            self.skip_frames -= 1
        if cut:
            self._on_cut(frame, skip)
        self._last_frame = frame.index

        window = self.window
        if window is None:
            return
        window.frames_seen += 1
        vector, scs = self._select(frame, external, window.saliency)
        accepted = vector is not None
        if self._out is not None:
            self._out.selections.append(SelectionRecord(t, frame.index, scs, accepted, window.saliency))
        if accepted:
            window.vectors[frame.index] = vector

        if len(window.vectors) >= cfg.window_cap_multiplier * window.target_len:
            # pathological content: start collecting afresh
            self._log_window("reset", t, frame.index, window)
            window.clear()

    def _on_cut(self, frame: Frame, skip: bool) -> None:
        cfg = self.config
        t = frame.timestamp_ms
        window = self.window
        if skip:
            if window is not None:
                self._log_window("skipped", t, frame.index, window)
            return
        if (
            window is not None
            and window.trigger is TransformSource.HEAD_MOVE
            and window.opened_at_ms == t
            and window.frames_seen == 0
        ):
            # pose jump and cut in one batch: the movement window takes bottom-up saliency
            window.saliency = Attention.BOTTOM_UP.value
            self.skip_frames = self.scheduler.bottom_up_window - 1
            self._log_window("restarted", t, frame.index, window)
            return
        if cfg.recalibration:
            self._open_window(TransformSource.SCENE_CUT, cfg.cut_window_n, Attention.BOTTOM_UP.value, t, frame.index)

    def _select(
        self, frame: Frame, external: SaliencyHeatmap | None, saliency: str
    ) -> tuple[FeatureVector | None, float]:
        cfg = self.config
        if saliency == Attention.TOP_DOWN.value and external is not None:
            with self._timed("top_down"):
                heatmap = external
                if (heatmap.width, heatmap.height) != (cfg.working_width, cfg.working_height):
                    raise ValueError(
                        f"frame {frame.index}: external heatmap is {heatmap.width}x{heatmap.height}, "
                        f"expected {cfg.working_width}x{cfg.working_height}"
                    )
        else:
            with self._timed("bottom_up"):
                small = downscale(frame, cfg.working_width, cfg.working_height)
                heatmap = self.detector(small)
        with self._timed("selection"):
            return select_frame(heatmap, frame.index, cfg, self.history)

    def _on_gaze(self, sample: RoughGazeSample) -> None:
        cfg = self.config
        with self._timed("compensation"):
            pos = sample.position
            if self.orientation is not Orientation.PORTRAIT:
                rot = self.last_pose.face_rotation_deg if self.last_pose else 0.0
                pos = landscape_compensate(
                    pos, rot, self.orientation, cfg.landscape_kx, cfg.landscape_y_floor, cfg.landscape_cy
                )
            t = self.current_transform
            x, y = apply_transform(pos, t) if t is not None else pos
        if self._out is not None:
            self._out.gazes.append(CalibratedGaze(sample.timestamp_ms, sample.frame_index, x, y, t is not None))
        window = self.window
        if window is not None and sample.frame_index in window.vectors:
            if pos != sample.position:
                sample = RoughGazeSample(sample.timestamp_ms, sample.frame_index, pos)
            window.samples.append(sample)

    def _try_calibrate(self, t_ms: float) -> None:
        window = self.window
        if window is None or not window.full:
            return
        cfg = self.config
        with self._timed("calibration"):
            result = calibrate_window(
                list(window.vectors.values()),
                window.samples,
                window.target_len,
                alpha=cfg.zscore_alpha,
                use_zscore=cfg.zscore,
                epsilon=cfg.cluster_epsilon,
                min_size=cfg.cluster_min_size,
                computed_at_ms=t_ms,
                source=window.trigger,
            )
        if result.transform is None:
            return
        self.current_transform = result.transform
        self.transforms.append(result.transform)
        self._log_window("closed", t_ms, self._last_frame, window)
        self.window = None
        if self._out is not None:
            self._out.transform = result.transform


def select_frame(
    heatmap: SaliencyHeatmap,
    frame_index: int,
    config: RunConfig,
    history: HistoricalTrajectories | None = None,
) -> tuple[FeatureVector | None, float]:
    """Score one heatmap and build its feature vector if it qualifies.

    With history, a frame that fails the SCS gate is still admitted when past
    users' gaze points exist for it; only those points then stand in for its
    saliency.
    """
    regions, scs = score_heatmap(heatmap, config.bin_threshold)
    vector = None
    if regions and scs >= config.scs_threshold:
        w, h = heatmap.width, heatmap.height
        peaks = tuple(pixel_to_screen(r.peak[0], r.peak[1], w, h) for r in regions)
        vector = FeatureVector(frame_index, len(regions), scs, peaks)
    if history is not None:
        if vector is not None:
            vector = merge_historical(vector, history)
        elif config.history_admits_rejected and history.for_frame(frame_index):
            vector = FeatureVector(frame_index, 0, scs, (), tuple(history.for_frame(frame_index)))
    return vector, scs


def run_events(session: Session, events: Sequence[Event]) -> list[StepOutput]:
    outs = [session.step(e) for e in events]
    outs.append(session.finish())
    return outs
