"""Synthetic scenarios with known ground truth.

Scenes are rendered from a small set of segment kinds; a minimal attention
model makes the true gaze follow the scene's primary target, and rough gaze
is the true gaze plus the active offset, Gaussian jitter and blink
excursions. Everything is a deterministic function of the config and seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from vgaze.calibration import RoughGazeSample
from vgaze.corpus import (
    FRAME_PATTERN,
    GAZE_CSV,
    HISTORY_CSV,
    MANIFEST,
    POSE_CSV,
    TOP_DOWN_PATTERN,
    TRUTH_JSON,
    FrameEntry,
    Manifest,
    write_gaze_csv,
    write_json,
    write_pgm,
    write_pose_csv,
)
from vgaze.config import field_type_error
from vgaze.heatmap import normalize_heatmap, pixel_to_screen
from vgaze.session import HeadPose

SEGMENT_KINDS = ("SingleBlob", "MultiBlob", "LargeRegion", "Blank")
POSE_DIMS = 6
_MARGIN = 6
_BLOB_PEAK = 200.0
_REGION_LEVEL = 170.0
_TEXTURE_AMPLITUDE = 8.0


class ScenarioError(ValueError):
    pass


@dataclass
class Segment:
    kind: str
    length_frames: int
    cut: bool = False
    k: int = 2
    area_ratio: float = 0.65
    walk_prob: float | None = None


@dataclass
class OffsetChange:
    from_frame: int
    offset: tuple[float, float]


@dataclass
class PoseJump:
    frame: int
    magnitude: float


@dataclass
class ScenarioConfig:
    """Knobs for one synthetic scenario.

    ``blink_rate`` is per minute; ``gaze_noise`` and ``blob_sigma`` are in
    normalized screen units. Offset changes at frame > 0 get a co-timed pose
    jump of ``pose_jump_magnitude`` unless ``pose_jumps`` already has one there.
    """

    segments: list[Segment]
    seed: int = 0
    fps: float = 30.0
    duration_s: float | None = None
    width: int = 160
    height: int = 90
    working_width: int = 68
    working_height: int = 68
    gaze_noise: float = 0.01
    tremor: float | None = None
    blink_rate: float = 17.0
    blink_amplitude: float = 0.15
    samples_per_frame: int = 2
    offsets: list[OffsetChange] = field(default_factory=lambda: [OffsetChange(0, (0.0, 0.0))])
    pose_jumps: list[PoseJump] = field(default_factory=list)
    pose_jump_magnitude: float = 0.05
    pose_jitter: float = 0.0002
    blob_sigma: float = 0.04
    walk_prob: float = 0.2
    gaze_lag_frames: int = 1
    history_users: int = 0
    history_noise: float = 0.01

    @property
    def n_frames(self) -> int:
        return sum(s.length_frames for s in self.segments)

    @property
    def tremor_sigma(self) -> float:
        return self.gaze_noise / 2 if self.tremor is None else self.tremor

    def validate(self) -> None:
        if not self.segments:
            raise ScenarioError("segments: at least one segment is required")
        for i, seg in enumerate(self.segments):
            where = f"segments[{i}]"
            if seg.kind not in SEGMENT_KINDS:
                raise ScenarioError(f"{where}.kind: must be one of {', '.join(SEGMENT_KINDS)} (got {seg.kind!r})")
            if seg.length_frames < 1:
                raise ScenarioError(f"{where}.length_frames: must be >= 1")
            if seg.kind == "MultiBlob" and seg.k < 2:
                raise ScenarioError(f"{where}.k: MultiBlob needs k >= 2")
            if seg.kind == "LargeRegion" and not 0.0 < seg.area_ratio < math.pi / 4:
                raise ScenarioError(f"{where}.area_ratio: must be in (0, pi/4)")
            if seg.walk_prob is not None and not 0.0 <= seg.walk_prob <= 1.0:
                raise ScenarioError(f"{where}.walk_prob: must be in [0, 1]")
        if self.fps <= 0:
            raise ScenarioError("fps: must be positive")
        if self.duration_s is not None and round(self.duration_s * self.fps) != self.n_frames:
            raise ScenarioError(
                f"duration_s: segments cover {self.n_frames} frames but duration_s * fps = {self.duration_s * self.fps:g}"
            )
        if self.width < 8 or self.height < 8:
            raise ScenarioError("width/height: frames must be at least 8x8")
        if self.working_width < 2 * _MARGIN + 1 or self.working_height < 2 * _MARGIN + 1:
            raise ScenarioError(f"working_width/working_height: must exceed {2 * _MARGIN}")
        if self.gaze_noise < 0:
            raise ScenarioError("gaze_noise: must be >= 0")
        if self.blink_rate < 0:
            raise ScenarioError("blink_rate: must be >= 0")
        if self.samples_per_frame < 1:
            raise ScenarioError("samples_per_frame: must be >= 1")
        if not self.offsets:
            raise ScenarioError("offsets: at least one entry is required")
        frames = [o.from_frame for o in self.offsets]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ScenarioError("offsets: from_frame values must be strictly increasing")
        if frames[0] < 0 or frames[-1] >= self.n_frames:
            raise ScenarioError("offsets: from_frame must lie inside the scenario")
        for j in self.pose_jumps:
            if not 0 <= j.frame < self.n_frames:
                raise ScenarioError(f"pose_jumps: frame {j.frame} outside the scenario")
        if self.gaze_lag_frames < 0:
            raise ScenarioError("gaze_lag_frames: must be >= 0")
        if self.history_users < 0:
            raise ScenarioError("history_users: must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ScenarioError("scenario: must be a JSON object")
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ScenarioError(f"{unknown[0]}: unknown scenario field")
        if "segments" not in data:
            raise ScenarioError("segments: required field is missing")
        if not isinstance(data["segments"], list):
            raise ScenarioError("segments: must be a list")
        segments = []
        for i, seg in enumerate(data["segments"]):
            if not isinstance(seg, dict):
                raise ScenarioError(f"segments[{i}]: must be an object")
            try:
                segments.append(Segment(**seg))
            except TypeError as exc:
                raise ScenarioError(f"segments[{i}]: {exc}") from None
            problem = field_type_error(segments[-1], f"segments[{i}].")
            if problem:
                raise ScenarioError(problem)
        data["segments"] = segments
        if "offsets" in data:
            try:
                data["offsets"] = [OffsetChange(int(o["from_frame"]), _pair(o["offset"])) for o in data["offsets"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioError(f"offsets: malformed entry ({exc!r})") from None
        if "pose_jumps" in data:
            try:
                data["pose_jumps"] = [PoseJump(int(p["frame"]), float(p["magnitude"])) for p in data["pose_jumps"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioError(f"pose_jumps: malformed entry ({exc!r})") from None
        cfg = cls(**data)
        problem = field_type_error(cfg)
        if problem:
            raise ScenarioError(problem)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "ScenarioConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class GroundTruth:
    """Per-frame truth; ``gaze`` rows always lie in the unit square."""

    gaze: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray
    segment: np.ndarray
    pose_events: list[dict]
    cuts: list[int]
    fps: float

    def to_json(self) -> dict:
        return {
            "fps": self.fps,
            "frames": [
                {"index": i, "gaze": [float(g[0]), float(g[1])], "target": [float(t[0]), float(t[1])],
                 "offset": [float(o[0]), float(o[1])], "segment": int(s)}
                for i, (g, t, o, s) in enumerate(zip(self.gaze, self.targets, self.offsets, self.segment))
            ],
            "pose_events": self.pose_events,
            "cuts": self.cuts,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        frames = data["frames"]
        return cls(
            gaze=np.array([f["gaze"] for f in frames], dtype=np.float64).reshape(-1, 2),
            targets=np.array([f.get("target", f["gaze"]) for f in frames], dtype=np.float64).reshape(-1, 2),
            offsets=np.array([f["offset"] for f in frames], dtype=np.float64).reshape(-1, 2),
            segment=np.array([f.get("segment", 0) for f in frames], dtype=np.int64),
            pose_events=list(data.get("pose_events", [])),
            cuts=list(data.get("cuts", [])),
            fps=float(data.get("fps", 30.0)),
        )


@dataclass
class GeneratedScenario:
    frames: list[np.ndarray]
    top_down: list[np.ndarray]
    manifest: Manifest
    truth: GroundTruth


@dataclass
class RoughTrace:
    samples: list[RoughGazeSample]
    poses: list[HeadPose]
    blinks: list[dict]


def _pair(v) -> tuple[float, float]:
    x, y = v
    return (float(x), float(y))


def frame_time_ms(i: float, fps: float) -> int:
    return int(round(i * 1000.0 / fps))


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("scene", "tremor", "noise", "blink", "pose", "history")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _offset_schedule(cfg: ScenarioConfig) -> np.ndarray:
    out = np.zeros((cfg.n_frames, 2))
    for change in cfg.offsets:
        out[change.from_frame :] = change.offset
    return out


def _pose_jumps(cfg: ScenarioConfig) -> list[PoseJump]:
    jumps = {j.frame: j for j in cfg.pose_jumps}
    for change in cfg.offsets:
        if change.from_frame > 0 and change.from_frame not in jumps:
            jumps[change.from_frame] = PoseJump(change.from_frame, cfg.pose_jump_magnitude)
    return [jumps[f] for f in sorted(jumps)]


class _Renderer:
    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self.fy, self.fx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
        self.wy, self.wx = np.mgrid[0 : cfg.working_height, 0 : cfg.working_width].astype(np.float64)

    def background(self, rng: np.random.Generator) -> np.ndarray:
        # smooth noise: a flat spectrum keeps the bottom-up detector quiet away from targets
        cfg = self.cfg
        noise = ndimage.gaussian_filter(rng.normal(size=(cfg.height, cfg.width)), sigma=0.08 * max(cfg.width, cfg.height), mode="wrap")
        noise /= max(np.abs(noise).max(), 1e-12)
        return rng.uniform(15, 45) + _TEXTURE_AMPLITUDE * noise

    def to_frame_px(self, p: tuple[float, float]) -> tuple[float, float]:
        return p[0] * self.cfg.width - 0.5, (1.0 - p[1]) * self.cfg.height - 0.5

    def blobs(self, bg: np.ndarray, centers_norm: list[tuple[float, float]]) -> np.ndarray:
        cfg = self.cfg
        sx, sy = cfg.blob_sigma * cfg.width, cfg.blob_sigma * cfg.height
        img = bg.copy()
        for p in centers_norm:
            u, v = self.to_frame_px(p)
            img += _BLOB_PEAK * np.exp(-0.5 * (((self.fx - u) / sx) ** 2 + ((self.fy - v) / sy) ** 2))
        return img

    def blob_heatmap(self, centers_px: list[tuple[int, int]]) -> np.ndarray:
        cfg = self.cfg
        sx, sy = cfg.blob_sigma * cfg.working_width, cfg.blob_sigma * cfg.working_height
        raw = np.zeros((cfg.working_height, cfg.working_width))
        for cx, cy in centers_px:
            raw = np.maximum(raw, np.exp(-0.5 * (((self.wx - cx) / sx) ** 2 + ((self.wy - cy) / sy) ** 2)))
        return normalize_heatmap(raw).values

    def region_masks(self, center: tuple[float, float], ratio: float) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        r = math.sqrt(ratio / math.pi)
        cxn, cyn = center

        def inside(xs, ys, w, h):
            return ((xs + 0.5) / w - cxn) ** 2 / r**2 + ((ys + 0.5) / h - (1.0 - cyn)) ** 2 / r**2 <= 1.0

        return (
            inside(self.fx, self.fy, cfg.width, cfg.height),
            inside(self.wx, self.wy, cfg.working_width, cfg.working_height),
        )


def _walk(pos: list[int], rng: np.random.Generator, prob: float, lo: tuple[int, int], hi: tuple[int, int]) -> None:
    if prob > 0 and rng.random() < prob:
        axis = int(rng.integers(2))
        step = 1 if rng.random() < 0.5 else -1
        pos[axis] = int(min(max(pos[axis] + step, lo[axis]), hi[axis]))


def generate_scenario(cfg: ScenarioConfig) -> GeneratedScenario:
    """Render frames, top-down heatmaps, the manifest and the ground truth."""
    cfg.validate()
    rngs = _streams(cfg.seed)
    rng = rngs["scene"]
    ww, wh = cfg.working_width, cfg.working_height
    # keep blobs clear of the border so periodic transforms do not wrap their tails
    margin = max(_MARGIN, math.ceil(4 * cfg.blob_sigma * max(ww, wh)))
    lo, hi = (margin, margin), (ww - 1 - margin, wh - 1 - margin)
    renderer = _Renderer(cfg)

    frames: list[np.ndarray] = []
    heatmaps: list[np.ndarray] = []
    targets = np.zeros((cfg.n_frames, 2))
    seg_of = np.zeros(cfg.n_frames, dtype=np.int64)
    entries = []
    cuts = []
    last_target = (0.5, 0.5)
    i = 0
    for s_idx, seg in enumerate(cfg.segments):
        walk_prob = cfg.walk_prob if seg.walk_prob is None else seg.walk_prob
        bg = renderer.background(rng)
        if seg.kind in ("SingleBlob", "MultiBlob"):
            count = 1 if seg.kind == "SingleBlob" else seg.k
            centers = _place_blobs(rng, count, lo, hi, min_sep=6 * cfg.blob_sigma * max(ww, wh))
        elif seg.kind == "LargeRegion":
            region_center = (0.5 + rng.uniform(-0.02, 0.02), 0.5 + rng.uniform(-0.02, 0.02))
            frame_mask, work_mask = renderer.region_masks(region_center, seg.area_ratio)
            region_img = np.where(frame_mask, _REGION_LEVEL, bg)
            region_hm = np.where(work_mask, 255, 0).astype(np.uint8)
            # the point of interest inside the region wanders within its inner part
            r_px = math.sqrt(seg.area_ratio / math.pi) * 0.5
            c_px = (int(round(region_center[0] * ww - 0.5)), int(round((1 - region_center[1]) * wh - 0.5)))
            inner_lo = (max(lo[0], int(c_px[0] - r_px * ww)), max(lo[1], int(c_px[1] - r_px * wh)))
            inner_hi = (min(hi[0], int(c_px[0] + r_px * ww)), min(hi[1], int(c_px[1] + r_px * wh)))
            poi = [int(rng.integers(inner_lo[0], inner_hi[0] + 1)), int(rng.integers(inner_lo[1], inner_hi[1] + 1))]
        else:
            level = float(rng.integers(0, 256))

        for f in range(seg.length_frames):
            if seg.kind in ("SingleBlob", "MultiBlob"):
                if f > 0:
                    for c in centers:
                        _walk(c, rng, walk_prob, lo, hi)
                norm = [pixel_to_screen(c[0], c[1], ww, wh) for c in centers]
                img = renderer.blobs(bg, norm)
                hm = renderer.blob_heatmap([tuple(c) for c in centers])
                target = norm[0]
            elif seg.kind == "LargeRegion":
                if f > 0:
                    _walk(poi, rng, walk_prob, inner_lo, inner_hi)
                img, hm = region_img, region_hm
                target = pixel_to_screen(poi[0], poi[1], ww, wh)
            else:
                img = np.full((cfg.height, cfg.width), level)
                hm = np.zeros((wh, ww), dtype=np.uint8)
                target = last_target
            frames.append(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))
            heatmaps.append(hm)
            targets[i] = target
            seg_of[i] = s_idx
            key = seg.cut and f == 0
            if key and i > 0:
                cuts.append(i)
            entries.append(FrameEntry(i, float(frame_time_ms(i, cfg.fps)), key, FRAME_PATTERN.format(i)))
            last_target = target
            i += 1

    gaze = _true_gaze(cfg, targets, seg_of, rngs["tremor"])
    jumps = _pose_jumps(cfg)
    pose_events = [{"frame": j.frame, "t_ms": float(frame_time_ms(j.frame, cfg.fps)), "magnitude": j.magnitude} for j in jumps]
    truth = GroundTruth(gaze, targets, _offset_schedule(cfg), seg_of, pose_events, cuts, cfg.fps)
    manifest = Manifest(cfg.fps, cfg.width, cfg.height, tuple(entries))
    return GeneratedScenario(frames, heatmaps, manifest, truth)


def _place_blobs(rng, count, lo, hi, min_sep) -> list[list[int]]:
    centers: list[list[int]] = []
    for _ in range(count):
        for _attempt in range(1000):
            c = [int(rng.integers(lo[0], hi[0] + 1)), int(rng.integers(lo[1], hi[1] + 1))]
            if all(math.dist(c, o) >= min_sep for o in centers):
                break
        centers.append(c)
    return centers


def _true_gaze(cfg: ScenarioConfig, targets: np.ndarray, seg_of: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # gaze trails the target by gaze_lag_frames, never reaching back across a segment boundary
    n = len(targets)
    idx = np.arange(n)
    seg_start = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        seg_start[i] = seg_start[i - 1] if seg_of[i] == seg_of[i - 1] else i
    src = np.maximum(idx - cfg.gaze_lag_frames, seg_start)
    gaze = targets[src].copy()
    if cfg.tremor_sigma > 0:
        gaze += rng.normal(0.0, cfg.tremor_sigma, size=gaze.shape)
    return np.clip(gaze, 0.0, 1.0)


def simulate_rough_gaze(truth: GroundTruth, cfg: ScenarioConfig) -> RoughTrace:
    """Rough samples (true + offset + jitter + blinks) and a per-frame head-pose stream."""
    rngs = _streams(cfg.seed)
    n, spf = len(truth.gaze), cfg.samples_per_frame
    total = n * spf
    base = np.repeat(truth.gaze + truth.offsets, spf, axis=0)
    if cfg.gaze_noise > 0:
        base = base + rngs["noise"].normal(0.0, cfg.gaze_noise, size=base.shape)

    blinks = []
    count = int(round(cfg.blink_rate * (n / cfg.fps) / 60.0))
    if count > 0 and total >= 2:
        brng = rngs["blink"]
        slot = total / count
        amplitude = max(cfg.blink_amplitude, 5 * cfg.gaze_noise)
        for b in range(count):
            lo_s = int(math.floor(b * slot))
            hi_s = max(lo_s, int(math.floor((b + 1) * slot)) - 2)
            start = int(brng.integers(lo_s, hi_s + 1))
            length = min(int(brng.integers(1, 3)), total - start)
            amp = amplitude * (1.0 + 0.5 * brng.random())
            base[start : start + length, 1] -= amp
            blinks.append({"sample": start, "length": length, "amplitude": amp})

    samples = []
    for k in range(total):
        i, j = divmod(k, spf)
        t = frame_time_ms(i + j / spf, cfg.fps)
        samples.append(RoughGazeSample(float(t), i, (float(base[k, 0]), float(base[k, 1]))))

    prng = rngs["pose"]
    pose = prng.normal(0.0, 0.1, size=POSE_DIMS)
    jumps = {e["frame"]: e["magnitude"] for e in truth.pose_events}
    poses = []
    for i in range(n):
        if i in jumps:
            direction = prng.normal(size=POSE_DIMS)
            pose = pose + jumps[i] * direction / np.linalg.norm(direction)
        jitter = prng.normal(0.0, cfg.pose_jitter, size=POSE_DIMS) if cfg.pose_jitter > 0 else 0.0
        poses.append(HeadPose(float(frame_time_ms(i, cfg.fps)), tuple(pose + jitter)))
    return RoughTrace(samples, poses, blinks)


def simulate_history(truth: GroundTruth, cfg: ScenarioConfig) -> list[tuple[str, int, float, float]]:
    """Past viewers' gaze points scattered around the true target of every frame."""
    if cfg.history_users == 0:
        return []
    rng = _streams(cfg.seed)["history"]
    noise = rng.normal(0.0, cfg.history_noise, size=(len(truth.targets), cfg.history_users, 2))
    pts = np.clip(truth.targets[:, None, :] + noise, 0.0, 1.0)
    return [
        (f"u{u:02d}", i, float(pts[i, u, 0]), float(pts[i, u, 1]))
        for i in range(len(truth.targets))
        for u in range(cfg.history_users)
    ]


def write_corpus(cfg: ScenarioConfig, out_dir: str | os.PathLike) -> dict:
    """Materialize a scenario on disk; returns a short summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scen = generate_scenario(cfg)
    trace = simulate_rough_gaze(scen.truth, cfg)
    for entry, img, hm in zip(scen.manifest.frames, scen.frames, scen.top_down):
        write_pgm(out / entry.file, img)
        write_pgm(out / TOP_DOWN_PATTERN.format(entry.index), hm)
    write_json(out / MANIFEST, scen.manifest.to_json())
    truth_json = scen.truth.to_json()
    truth_json["blinks"] = trace.blinks
    write_json(out / TRUTH_JSON, truth_json)
    write_gaze_csv(out / GAZE_CSV, trace.samples)
    write_pose_csv(out / POSE_CSV, trace.poses)
    history = simulate_history(scen.truth, cfg)
    if history:
        with open(out / HISTORY_CSV, "w") as fh:
            fh.write("user_id,frame_index,x,y\n")
            for user, frame, x, y in history:
                fh.write(f"{user},{frame},{x!r},{y!r}\n")
    kinds: dict[str, int] = {}
    for seg in cfg.segments:
        kinds[seg.kind] = kinds.get(seg.kind, 0) + seg.length_frames
    return {
        "frames": cfg.n_frames,
        "gaze_samples": len(trace.samples),
        "blinks": len(trace.blinks),
        "cuts": len(scen.truth.cuts),
        "pose_jumps": len(scen.truth.pose_events),
        "history_points": len(history),
        "frames_by_kind": kinds,
        "out_dir": str(out),
    }
