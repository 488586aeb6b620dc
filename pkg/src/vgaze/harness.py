"""Pipeline execution, evaluation against simulator truth, and parameter sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from vgaze.calibration import HistoricalTrajectories, load_history
from vgaze.config import ConfigError, RunConfig
from vgaze.corpus import Corpus, CorpusError, FrameEntry
from vgaze.heatmap import SaliencyHeatmap, downscale, spectral_residual_saliency
from vgaze.session import FrameArrived, Session, StepOutput, select_frame
from vgaze.temporal import Attention, AttentionScheduler

VALID_FRAMES = 30


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- JSONL records


def gaze_record(g) -> dict:
    return {"t_ms": g.t_ms, "frame": g.frame, "x": g.x, "y": g.y, "calibrated": g.calibrated}


def transform_record(t) -> dict:
    return {"t_ms": t.computed_at_ms, "vc": [t.dx, t.dy], "source": t.source.value}


def selection_record(s) -> dict:
    return {"t_ms": s.t_ms, "frame": s.frame, "scs": s.scs, "accepted": s.accepted, "saliency": s.saliency}


def window_record(w) -> dict:
    return {"t_ms": w.t_ms, "frame": w.frame, "window": w.action, "trigger": w.trigger.value,
            "target_len": w.target_len, "saliency": w.saliency}


def step_records(out: StepOutput, verbose: bool = True) -> Iterator[dict]:
    """Records in emission order: window changes and selections first, then gazes, then a new transform."""
    if verbose:
        yield from (window_record(w) for w in out.windows)
        yield from (selection_record(s) for s in out.selections)
    yield from (gaze_record(g) for g in out.gazes)
    if out.transform is not None:
        yield transform_record(out.transform)


def dump_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def record_kind(rec: dict) -> str:
    if "vc" in rec:
        return "transform"
    if "window" in rec:
        return "window"
    if "scs" in rec:
        return "selection"
    if "x" in rec and "y" in rec:
        return "gaze"
    raise EvaluationError(f"unrecognized record: {rec!r}")


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EvaluationError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
    return out


# ---------------------------------------------------------------- running


@dataclass
class RunResult:
    records: int
    gazes: int
    transforms: list[dict]
    timings: dict[str, dict[str, float]]
    frames: int
    wall_s: float

    def timing_table(self) -> str:
        lines = [f"{'module':<12} {'calls':>7} {'total ms':>10} {'mean ms':>9}"]
        for key, t in self.timings.items():
            lines.append(f"{key:<12} {t['calls']:>7d} {t['total_ms']:>10.2f} {t['mean_ms']:>9.4f}")
        fps = self.frames / self.wall_s if self.wall_s > 0 else float("inf")
        lines.append(f"{self.frames} frames in {self.wall_s:.3f} s ({fps:.1f} frames/s end to end)")
        return "\n".join(lines)


class _Prefetcher:
    """Load frames (and speculatively their bottom-up heatmaps) on a worker pool.

    The session still decides which heatmap to use; a bottom-up result
    computed ahead of time is simply looked up by frame index.
    """

    def __init__(self, corpus: Corpus, config: RunConfig, threads: int, lookahead: int = 8) -> None:
        self.corpus = corpus
        self.config = config
        self.threads = threads
        self.lookahead = max(lookahead, 2 * threads)
        self._ready: dict[int, SaliencyHeatmap] = {}

    def _load(self, entry: FrameEntry) -> tuple[FrameArrived, SaliencyHeatmap]:
        arrival = self.corpus.load_arrival(entry)
        small = downscale(arrival.frame, self.config.working_width, self.config.working_height)
        return arrival, spectral_residual_saliency(small)

    def __call__(self, entries: Iterable[FrameEntry]) -> Iterator[FrameArrived]:
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            pending: deque = deque()
            it = iter(entries)
            for entry in itertools.islice(it, self.lookahead):
                pending.append(pool.submit(self._load, entry))
            while pending:
                arrival, heatmap = pending.popleft().result()
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(self._load, nxt))
                # the session consumes a frame before asking for the next one
                self._ready = {arrival.frame.index: heatmap}
                yield arrival

    def detector(self, frame) -> SaliencyHeatmap:
        hm = self._ready.pop(frame.index, None)
        return hm if hm is not None else spectral_residual_saliency(frame)


def load_run_history(config: RunConfig) -> HistoricalTrajectories | None:
    if config.history is None:
        return None
    if not Path(config.history).is_file():
        raise CorpusError(f"{config.history}: history file not found")
    return load_history(config.history)


def run_pipeline(
    corpus: Corpus | str | os.PathLike,
    config: RunConfig,
    out: io.TextIOBase | str | os.PathLike,
    threads: int = 1,
    verbose_records: bool = True,
) -> RunResult:
    """Feed the corpus through a session and write JSON lines to ``out``."""
    corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
    config = config.for_fps(corpus.fps)
    history = load_run_history(config)
    if threads < 1:
        raise ConfigError(f"threads: must be >= 1 (got {threads})")
    if threads > 1:
        pre = _Prefetcher(corpus, config, threads)
        session = Session(config, pre.detector, history)
        events = corpus.events(pre)
    else:
        session = Session(config, history=history)
        events = corpus.events()

    own = not hasattr(out, "write")
    fh = open(out, "w") if own else out
    n_records = n_gazes = 0
    transforms = []
    start = time.perf_counter()
    try:
        outputs = itertools.chain((session.step(ev) for ev in events), iter([None]))
        for step_out in outputs:
            if step_out is None:
                step_out = session.finish()
            for rec in step_records(step_out, verbose_records):
                fh.write(dump_record(rec) + "\n")
                n_records += 1
                if "calibrated" in rec:
                    n_gazes += 1
                elif "vc" in rec:
                    transforms.append(rec)
    finally:
        if own:
            fh.close()
    wall = time.perf_counter() - start
    return RunResult(n_records, n_gazes, transforms, session.timings, len(corpus.manifest.frames), wall)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class ScreenGeometry:
    diag_cm: float | None = None
    aspect: tuple[float, float] = (16.0, 9.0)
    view_dist_cm: float = 30.0

    def __post_init__(self) -> None:
        if self.diag_cm is not None and self.diag_cm <= 0:
            raise ConfigError(f"screen_diag_cm: must be > 0 (got {self.diag_cm})")
        if min(self.aspect) <= 0:
            raise ConfigError(f"aspect: both sides must be > 0 (got {self.aspect})")
        if self.view_dist_cm <= 0:
            raise ConfigError(f"view_dist_cm: must be > 0 (got {self.view_dist_cm})")

    @property
    def size_cm(self) -> tuple[float, float] | None:
        if self.diag_cm is None:
            return None
        aw, ah = self.aspect
        scale = self.diag_cm / math.hypot(aw, ah)
        return aw * scale, ah * scale


def parse_aspect(text: str) -> tuple[float, float]:
    try:
        w, h = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"aspect: expected W:H, got {text!r}") from None
    return w, h


def cm_to_deg(err_cm: np.ndarray | float, view_dist_cm: float) -> np.ndarray:
    return np.degrees(2.0 * np.arctan(np.asarray(err_cm) / (2.0 * view_dist_cm)))


def summarize(errors: Sequence[float]) -> dict[str, float | int | None]:
    if len(errors) == 0:
        return {"count": 0, "mean": None, "median": None, "p95": None}
    e = np.asarray(errors, dtype=np.float64)
    return {"count": int(e.size), "mean": float(e.mean()), "median": float(np.median(e)),
            "p95": float(np.percentile(e, 95))}


def frames_cost(scored: int, accepted: int, valid: int = VALID_FRAMES) -> float | None:
    """Frames consumed per ``valid`` accepted frames (None when nothing was accepted)."""
    if accepted == 0:
        return None
    return valid * scored / accepted


@dataclass
class Evaluation:
    report: dict[str, Any]
    series: list[tuple[float, int, float, bool]] = field(default_factory=list)

    def write_series(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_ms", "frame", "error", "calibrated"])
            for t, f, e, c in self.series:
                w.writerow([_num(t), f, repr(e), int(c)])


def _num(v: float):
    return int(v) if float(v).is_integer() else repr(float(v))


def evaluate(
    records: Sequence[dict],
    truth: dict,
    geometry: ScreenGeometry = ScreenGeometry(),
    settle_frames: int = 20,
) -> Evaluation:
    """Error statistics of the emitted gaze stream against per-frame true gaze.

    ``settle_frames`` sets where the settled part of each post-jump interval
    begins (default twice the default window length).
    """
    frames = truth.get("frames")
    if not isinstance(frames, list) or not frames:
        raise EvaluationError("truth: no per-frame records")
    true_gaze = np.array([f["gaze"] for f in frames], dtype=np.float64).reshape(-1, 2)

    gazes, transforms, selections = [], [], []
    for rec in records:
        kind = record_kind(rec)
        if kind == "gaze":
            gazes.append(rec)
        elif kind == "transform":
            transforms.append(rec)
        elif kind == "selection":
            selections.append(rec)
    if not gazes:
        raise EvaluationError("run output has no gaze records")

    idx = np.array([g["frame"] for g in gazes], dtype=np.int64)
    if idx.min() < 0 or idx.max() >= len(true_gaze):
        raise EvaluationError(
            f"gaze record refers to frame {int(idx.max())} but truth has {len(true_gaze)} frames; mismatched corpus?"
        )
    emitted = np.array([(g["x"], g["y"]) for g in gazes], dtype=np.float64)
    calibrated = np.array([bool(g["calibrated"]) for g in gazes])
    diff = emitted - true_gaze[idx]
    err = np.hypot(diff[:, 0], diff[:, 1])

    report: dict[str, Any] = {
        "samples": int(err.size),
        "calibrated_samples": int(calibrated.sum()),
        "error": summarize(err),
        "calibrated_error": summarize(err[calibrated]),
    }
    size = geometry.size_cm
    if size is not None:
        err_cm = np.hypot(diff[:, 0] * size[0], diff[:, 1] * size[1])
        report["screen_cm"] = [size[0], size[1]]
        report["error_cm"] = summarize(err_cm)
        report["calibrated_error_cm"] = summarize(err_cm[calibrated])
        report["view_dist_cm"] = geometry.view_dist_cm
        report["calibrated_error_deg"] = summarize(cm_to_deg(err_cm[calibrated], geometry.view_dist_cm))

    report["transforms"] = [{"t_ms": t["t_ms"], "vc": t["vc"], "source": t["source"]} for t in transforms]
    counts: dict[str, int] = {}
    for t in transforms:
        counts[t["source"]] = counts.get(t["source"], 0) + 1
    report["transform_counts"] = counts

    accepted = sum(1 for s in selections if s["accepted"])
    report["selection"] = {"scored": len(selections), "accepted": accepted,
                           "frames_cost": frames_cost(len(selections), accepted)}

    jumps = sorted(int(e["frame"]) for e in truth.get("pose_events", []))
    post = []
    for k, f in enumerate(jumps):
        end = jumps[k + 1] if k + 1 < len(jumps) else len(true_gaze)
        span = (idx >= f) & (idx < end)
        settled = (idx >= f + settle_frames) & (idx < end)
        post.append({"frame": f, "mean_error": summarize(err[span])["mean"],
                     "settled_mean_error": summarize(err[settled])["mean"]})
    report["post_jump"] = post

    series = [(float(g["t_ms"]), int(g["frame"]), float(e), bool(c)) for g, e, c in zip(gazes, err, calibrated)]
    return Evaluation(report, series)


def load_truth(path: str | os.PathLike) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{path}: invalid JSON: {exc}") from None


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=1, allow_nan=False) + "\n"


# ---------------------------------------------------------------- offline selection and sweeps


class HeatmapCache:
    """Per-frame heatmaps for repeated offline scoring of one corpus."""

    def __init__(self, corpus: Corpus, working: tuple[int, int] = (68, 68)) -> None:
        self.corpus = corpus
        self.working = working
        self._bottom_up: dict[int, SaliencyHeatmap] = {}
        self._top_down: dict[int, SaliencyHeatmap | None] = {}

    def bottom_up(self, entry: FrameEntry) -> SaliencyHeatmap:
        hm = self._bottom_up.get(entry.index)
        if hm is None:
            small = downscale(self.corpus.load_frame(entry), *self.working)
            hm = self._bottom_up[entry.index] = spectral_residual_saliency(small)
        return hm

    def top_down(self, entry: FrameEntry) -> SaliencyHeatmap | None:
        if entry.index not in self._top_down:
            self._top_down[entry.index] = self.corpus.load_top_down(entry.index)
        return self._top_down[entry.index]


def attention_schedule(corpus: Corpus, config: RunConfig) -> list[Attention]:
    """Attention mode in force at every frame (scene cuts only; no session state)."""
    config = config.for_fps(corpus.fps)
    sched = AttentionScheduler(config.bottom_up_frames, config.cut_hash_threshold, config.every_frame_is_key)
    modes = []
    for entry in corpus.manifest.frames:
        sched.observe(corpus.load_frame(entry))
        modes.append(sched.mode.mode)
    return modes


def offline_selection(
    corpus: Corpus,
    config: RunConfig,
    cache: HeatmapCache | None = None,
    modes: Sequence[Attention] | None = None,
    history: HistoricalTrajectories | None = None,
) -> list[bool]:
    """Accept/reject every frame with the heatmap its attention mode calls for."""
    config = config.for_fps(corpus.fps)
    cache = cache or HeatmapCache(corpus, (config.working_width, config.working_height))
    modes = modes if modes is not None else attention_schedule(corpus, config)
    flags = []
    for entry, mode in zip(corpus.manifest.frames, modes):
        heatmap = cache.top_down(entry) if mode is Attention.TOP_DOWN else None
        if heatmap is None:
            heatmap = cache.bottom_up(entry)
        vector, _ = select_frame(heatmap, entry.index, config, history)
        flags.append(vector is not None)
    return flags


def parse_grid(specs: Sequence[str]) -> dict[str, list[Any]]:
    """``name=v1,v2`` strings to a field -> values mapping, coerced by the field's default type."""
    defaults = RunConfig().to_dict()
    grid: dict[str, list[Any]] = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        name = name.strip()
        if not sep or not values:
            raise ConfigError(f"grid: expected name=v1,v2,... got {spec!r}")
        if name not in defaults:
            raise ConfigError(f"grid: unknown config field {name!r}")
        grid[name] = [coerce_field(name, v.strip()) for v in values.split(",")]
    return grid


def coerce_field(name: str, text: str) -> Any:
    ftype = str({f.name: f.type for f in fields(RunConfig)}[name])
    try:
        if text.lower() in ("none", "null") and "None" in ftype:
            return None
        if ftype.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype.startswith("int"):
            return int(text)
        if ftype.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {ftype}") from None
    return text


def sweep(
    corpus_dir: str | os.PathLike,
    base: RunConfig,
    grid: dict[str, list[Any]],
    truth_path: str | os.PathLike | None = None,
    geometry: ScreenGeometry = ScreenGeometry(),
) -> list[dict[str, Any]]:
    """One row per grid cell: offline frames cost and, given a truth file, run accuracy."""
    corpus = Corpus(corpus_dir)
    truth = load_truth(truth_path) if truth_path else None
    cache = HeatmapCache(corpus, (base.working_width, base.working_height))
    names = list(grid)
    rows = []
    schedules: dict[tuple, list[Attention]] = {}
    for values in itertools.product(*(grid[n] for n in names)):
        cfg = base.with_overrides(**dict(zip(names, values)))
        if (cfg.working_width, cfg.working_height) != cache.working:
            cache = HeatmapCache(corpus, (cfg.working_width, cfg.working_height))
        key = (cfg.bottom_up_frames, cfg.bottom_up_ms, cfg.cut_hash_threshold, cfg.every_frame_is_key)
        if key not in schedules:
            schedules[key] = attention_schedule(corpus, cfg)
        history = load_run_history(cfg)
        flags = offline_selection(corpus, cfg, cache, schedules[key], history)
        row: dict[str, Any] = dict(zip(names, values))
        row.update(frames=len(flags), accepted=sum(flags), frames_cost=frames_cost(len(flags), sum(flags)))
        if truth is not None:
            buf = io.StringIO()
            run_pipeline(corpus, cfg, buf, verbose_records=False)
            ev = evaluate([json.loads(line) for line in buf.getvalue().splitlines()], truth, geometry)
            row.update(
                transforms=len(ev.report["transforms"]),
                mean_error=ev.report["error"]["mean"],
                calibrated_mean_error=ev.report["calibrated_error"]["mean"],
                calibrated_p95_error=ev.report["calibrated_error"]["p95"],
            )
        rows.append(row)
    return rows


def write_table(rows: Sequence[dict], fh) -> None:
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
