"""On-disk corpus layout: PGM frames, manifest, gaze/pose traces and top-down heatmaps.

A corpus directory holds::

    manifest.json          fps, frame size, per-frame timestamp and key-frame flag
    frame_%06d.pgm         binary PGM (P5, maxval 255), one per frame
    sal_td_%06d.pgm        optional top-down heatmaps at working resolution
    gaze.csv               t_ms,frame_index,x,y
    pose.csv               optional t_ms,p0..pK,face_rotation_deg
    history.csv            optional user_id,frame_index,x,y
    truth.json             simulator ground truth (evaluation only)
"""

from __future__ import annotations

import csv
import heapq
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from vgaze.calibration import RoughGazeSample
from vgaze.heatmap import Frame, HeatmapSource, SaliencyHeatmap
from vgaze.session import Event, FrameArrived, GazeSample, HeadPose, PoseSample

FRAME_PATTERN = "frame_{:06d}.pgm"
TOP_DOWN_PATTERN = "sal_td_{:06d}.pgm"
MANIFEST = "manifest.json"
GAZE_CSV = "gaze.csv"
POSE_CSV = "pose.csv"
HISTORY_CSV = "history.csv"
TRUTH_JSON = "truth.json"


class CorpusError(ValueError):
    pass


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.ndim != 2:
        raise ValueError(f"PGM needs a 2D grid, got shape {px.shape}")
    px = np.clip(px, 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise CorpusError(f"{path}: truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise CorpusError(f"{path}: expected binary PGM (P5), got {magic.decode(errors='replace')}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise CorpusError(f"{path}: malformed PGM header") from None
    if maxval > 255 or maxval < 1:
        raise CorpusError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise CorpusError(f"{path}: expected {w * h} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


@dataclass(frozen=True)
class FrameEntry:
    index: int
    t_ms: float
    key: bool
    file: str


@dataclass(frozen=True)
class Manifest:
    fps: float
    width: int
    height: int
    frames: tuple[FrameEntry, ...]

    def to_json(self) -> dict:
        return {
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "frames": [{"index": f.index, "t_ms": f.t_ms, "key": f.key, "file": f.file} for f in self.frames],
        }

    @classmethod
    def from_json(cls, data: dict, where: str = MANIFEST) -> "Manifest":
        try:
            frames = tuple(
                FrameEntry(int(f["index"]), float(f["t_ms"]), bool(f.get("key", False)),
                           str(f.get("file", FRAME_PATTERN.format(int(f["index"])))))
                for f in data["frames"]
            )
            manifest = cls(float(data["fps"]), int(data["width"]), int(data["height"]), frames)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{where}: malformed manifest ({exc!r})") from None
        for a, b in zip(frames, frames[1:]):
            if b.index <= a.index or b.t_ms <= a.t_ms:
                raise CorpusError(f"{where}: frame {b.index} does not strictly follow frame {a.index}")
        return manifest


def write_json(path: str | os.PathLike, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=False)
        fh.write("\n")


def write_gaze_csv(path: str | os.PathLike, samples: list[RoughGazeSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", "frame_index", "x", "y"])
        for s in samples:
            w.writerow([_num(s.timestamp_ms), s.frame_index, repr(s.position[0]), repr(s.position[1])])


def read_gaze_csv(path: str | os.PathLike) -> list[RoughGazeSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"t_ms", "frame_index", "x", "y"} - set(reader.fieldnames or ())
        if missing:
            raise CorpusError(f"{path}: missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                out.append(RoughGazeSample(float(row["t_ms"]), int(row["frame_index"]), (float(row["x"]), float(row["y"]))))
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{line_no}: {exc}") from None
    return out


def write_pose_csv(path: str | os.PathLike, poses: list[HeadPose]) -> None:
    dims = len(poses[0].pose) if poses else 6
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", *(f"p{i}" for i in range(dims)), "face_rotation_deg"])
        for p in poses:
            w.writerow([_num(p.timestamp_ms), *(repr(v) for v in p.pose), repr(p.face_rotation_deg)])


def read_pose_csv(path: str | os.PathLike) -> list[HeadPose]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "t_ms":
            raise CorpusError(f"{path}: expected a header starting with t_ms")
        dims = [i for i, name in enumerate(header) if name.startswith("p")]
        rot = header.index("face_rotation_deg") if "face_rotation_deg" in header else None
        for line_no, row in enumerate(reader, start=2):
            try:
                out.append(HeadPose(float(row[0]), tuple(float(row[i]) for i in dims),
                                    float(row[rot]) if rot is not None else 0.0))
            except (IndexError, ValueError) as exc:
                raise CorpusError(f"{path}:{line_no}: {exc}") from None
    return out


def _num(v: float):
    return int(v) if float(v).is_integer() else repr(float(v))


class Corpus:
    """Read access to a corpus directory."""

    def __init__(self, root: str | os.PathLike, gaze_path: str | os.PathLike | None = None) -> None:
        self.root = Path(root)
        manifest_path = self.root / MANIFEST
        if not manifest_path.is_file():
            raise CorpusError(f"{manifest_path}: manifest not found")
        try:
            data = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{manifest_path}: invalid JSON: {exc}") from None
        self.manifest = Manifest.from_json(data, str(manifest_path))
        self.gaze_path = Path(gaze_path) if gaze_path else self.root / GAZE_CSV
        if not self.gaze_path.is_file():
            raise CorpusError(f"{self.gaze_path}: gaze trace not found")

    @property
    def fps(self) -> float:
        return self.manifest.fps

    def load_frame(self, entry: FrameEntry) -> Frame:
        path = self.root / entry.file
        if not path.is_file():
            raise CorpusError(f"{path}: frame file not found")
        return Frame(entry.index, entry.t_ms, read_pgm(path), entry.key)

    def load_top_down(self, index: int) -> SaliencyHeatmap | None:
        path = self.root / TOP_DOWN_PATTERN.format(index)
        if not path.is_file():
            return None
        return SaliencyHeatmap(read_pgm(path), HeatmapSource.TOP_DOWN_EXTERNAL)

    def load_arrival(self, entry: FrameEntry) -> FrameArrived:
        return FrameArrived(self.load_frame(entry), self.load_top_down(entry.index))

    def gaze(self) -> list[RoughGazeSample]:
        return read_gaze_csv(self.gaze_path)

    def poses(self) -> list[HeadPose]:
        path = self.root / POSE_CSV
        return read_pose_csv(path) if path.is_file() else []

    def history_path(self) -> Path | None:
        path = self.root / HISTORY_CSV
        return path if path.is_file() else None

    def events(self, loader=None) -> Iterator[Event]:
        """Merge poses, frames and gaze by timestamp; ties go pose, frame, gaze.

        ``loader`` maps an iterable of frame entries to FrameArrived events in
        order (lets callers prefetch on a worker pool).
        """
        loader = loader or (lambda entries: map(self.load_arrival, entries))
        poses = ((p.timestamp_ms, 0, i, PoseSample(p)) for i, p in enumerate(self.poses()))
        frames = ((e.frame.timestamp_ms, 1, i, e) for i, e in enumerate(loader(self.manifest.frames)))
        gazes = ((s.timestamp_ms, 2, i, GazeSample(s)) for i, s in enumerate(self.gaze()))
        for _, _, _, ev in heapq.merge(poses, frames, gazes, key=lambda item: item[:3]):
            yield ev
