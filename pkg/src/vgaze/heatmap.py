"""Spatial saliency: heatmap normalization, region analysis and concentration scoring.

Everything here is a pure function over immutable values, so frames can be
scored in parallel without coordination.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

WORKING_SIZE = (68, 68)
DEFAULT_BIN_THRESHOLD = 128
DEFAULT_SCS_THRESHOLD = 0.6

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_AMPLITUDE_FLOOR = 0.01


class HeatmapSource(enum.Enum):
    BOTTOM_UP = "BottomUp"
    TOP_DOWN_EXTERNAL = "TopDownExternal"
    HISTORICAL = "Historical"


@dataclass(frozen=True, eq=False)
class Frame:
    """One grayscale video frame.

    Attributes:
        index: Position of the frame in its stream.
        timestamp_ms: Milliseconds since stream start.
        pixels: ``(height, width)`` uint8 array, row-major.
        is_key_frame: Key-frame flag carried by the input manifest.
    """

    index: int
    timestamp_ms: float
    pixels: np.ndarray
    is_key_frame: bool = False

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"frame {self.index}: pixels must be a non-empty 2D grid, got shape {px.shape}")
        if self.index < 0:
            raise ValueError(f"frame index must be non-negative, got {self.index}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError(f"frame {self.index}: pixel values outside 0..255")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class SaliencyHeatmap:
    values: np.ndarray
    source: HeatmapSource = HeatmapSource.BOTTOM_UP

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.values, dtype=np.uint8)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"heatmap must be a non-empty 2D grid, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Region:
    """A connected salient region; ``peak`` is ``(col, row)`` of its hottest pixel."""

    label: int
    area_px: int
    peak: tuple[int, int]


@dataclass(frozen=True)
class FeatureVector:
    """Per-frame saliency summary handed to calibration.

    ``peaks`` and ``historical_points`` are normalized screen coordinates with
    the origin at the bottom-left corner.
    """

    frame_index: int
    n: int
    scs: float
    peaks: tuple[tuple[float, float], ...]
    historical_points: tuple[tuple[float, float], ...] = field(default=())

    @property
    def points(self) -> tuple[tuple[float, float], ...]:
        """Every point that enters saliency-side clustering, peaks first."""
        return self.peaks + self.historical_points


class SaliencyDetector(Protocol):
    def __call__(self, frame: Frame) -> SaliencyHeatmap: ...


def _area_weights(src: int, dst: int) -> np.ndarray:
    # row i of the result averages source cells overlapping [i*src/dst, (i+1)*src/dst)
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for k in range(int(math.floor(lo)), min(src, int(math.ceil(hi)))):
            overlap = min(hi, k + 1) - max(lo, k)
            if overlap > 0:
                w[i, k] = overlap / scale
    return w


_WEIGHT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _weights(src: int, dst: int) -> np.ndarray:
    key = (src, dst)
    w = _WEIGHT_CACHE.get(key)
    if w is None:
        w = _area_weights(src, dst)
        w.setflags(write=False)
        _WEIGHT_CACHE[key] = w
    return w


def area_resize(pixels: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Box-filter resample to ``(target_h, target_w)``; returns float64, unrounded."""
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target size must be at least 1x1, got {target_w}x{target_h}")
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img.copy()
    return _weights(h, target_h) @ img @ _weights(w, target_w).T


def downscale(frame: Frame, target_w: int = WORKING_SIZE[0], target_h: int = WORKING_SIZE[1]) -> Frame:
    """Area-average ``frame`` down (or up) to ``target_w`` x ``target_h``."""
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target size must be at least 1x1, got {target_w}x{target_h}")
    if (frame.width, frame.height) == (target_w, target_h):
        return Frame(frame.index, frame.timestamp_ms, frame.pixels.copy(), frame.is_key_frame)
    out = area_resize(frame.pixels, target_w, target_h)
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return Frame(frame.index, frame.timestamp_ms, out, frame.is_key_frame)


def normalize_heatmap(raw, source: HeatmapSource = HeatmapSource.BOTTOM_UP) -> SaliencyHeatmap:
    """Min-max map a real-valued grid onto 0..255, rounding halves up.

    A constant grid carries no saliency and maps to all zeros.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.size == 0:
        raise ValueError("cannot normalize an empty grid")
    if not np.all(np.isfinite(arr)):
        raise ValueError("heatmap contains non-finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return SaliencyHeatmap(np.zeros(arr.shape, dtype=np.uint8), source)
    scaled = (arr - lo) / (hi - lo) * 255.0
    out = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    return SaliencyHeatmap(out, source)


def binarize(heatmap: SaliencyHeatmap, threshold: int = DEFAULT_BIN_THRESHOLD) -> np.ndarray:
    """Salient iff value >= threshold."""
    return heatmap.values >= threshold


def connected_components(mask: np.ndarray, heatmap: SaliencyHeatmap) -> list[Region]:
    """Label 8-connected regions of ``mask``.

    Regions are numbered by their first pixel in row-major order. Each
    region's peak is its maximum heatmap value, ties going to the smallest
    row-major index.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != heatmap.values.shape:
        raise ValueError(f"mask shape {mask.shape} does not match heatmap shape {heatmap.values.shape}")
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        return []
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    val = heatmap.values.ravel()[idx].astype(np.int64)

    areas = np.bincount(lab, minlength=count + 1)
    # idx is ascending, so the first hit of each label is its first pixel
    uniq, first_pos = np.unique(lab, return_index=True)
    first_px = idx[first_pos]
    order = np.lexsort((idx, -val, lab))
    _, peak_pos = np.unique(lab[order], return_index=True)
    peak_px = idx[order][peak_pos]

    width = mask.shape[1]
    regions = []
    for new_label, k in enumerate(np.argsort(first_px, kind="stable"), start=1):
        p = int(peak_px[k])
        regions.append(Region(label=new_label, area_px=int(areas[uniq[k]]), peak=(p % width, p // width)))
    return regions


def compute_scs(regions: Sequence[Region], total_area: int) -> float:
    """Saliency concentration score, clamped below at zero.

    Fewer and smaller salient regions push the score towards 1.
    """
    if total_area < 1:
        raise ValueError(f"total_area must be >= 1, got {total_area}")
    n = len(regions)
    if n == 0:
        return 0.0
    salient = sum(r.area_px for r in regions)
    if salient > total_area:
        raise ValueError(f"salient area {salient} exceeds total area {total_area}")
    return max(0.0, 1.0 / math.log2(n + 1) - salient / total_area)


def pixel_to_screen(col: float, row: float, width: int, height: int) -> tuple[float, float]:
    """Pixel center -> normalized screen coordinate with a bottom-left origin."""
    return ((col + 0.5) / width, 1.0 - (row + 0.5) / height)


def score_heatmap(heatmap: SaliencyHeatmap, bin_threshold: int = DEFAULT_BIN_THRESHOLD) -> tuple[list[Region], float]:
    regions = connected_components(binarize(heatmap, bin_threshold), heatmap)
    return regions, compute_scs(regions, heatmap.width * heatmap.height)


def extract_feature_vector(
    heatmap: SaliencyHeatmap,
    bin_threshold: int = DEFAULT_BIN_THRESHOLD,
    frame_index: int = 0,
    scs_threshold: float = DEFAULT_SCS_THRESHOLD,
) -> FeatureVector | None:
    """Summarize a heatmap for calibration, or return None when its SCS is too low."""
    regions, scs = score_heatmap(heatmap, bin_threshold)
    if scs < scs_threshold or not regions:
        return None
    w, h = heatmap.width, heatmap.height
    peaks = tuple(pixel_to_screen(r.peak[0], r.peak[1], w, h) for r in regions)
    return FeatureVector(frame_index=frame_index, n=len(regions), scs=scs, peaks=peaks)


def spectral_residual_saliency(frame: Frame) -> SaliencyHeatmap:
    """Bottom-up saliency from the spectral residual of the log-amplitude spectrum."""
    img = frame.pixels.astype(np.float64)
    if img.max() == img.min():
        return SaliencyHeatmap(np.zeros(img.shape, dtype=np.uint8), HeatmapSource.BOTTOM_UP)
    spectrum = np.fft.fft2(img)
    amp = np.abs(spectrum)
    # flat-edged shapes have exact spectral zeros; a small floor keeps their log finite and tame
    log_amp = np.log(amp + _AMPLITUDE_FLOOR * amp.mean())
    # the spectrum is periodic, so the local average wraps
    residual = log_amp - ndimage.uniform_filter(log_amp, size=3, mode="wrap")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * np.angle(spectrum)))) ** 2
    sal = ndimage.uniform_filter(sal, size=3, mode="nearest")
    peak = sal.max()
    if peak - sal.min() <= 1e-12 * max(peak, 1.0):
        return SaliencyHeatmap(np.zeros(img.shape, dtype=np.uint8), HeatmapSource.BOTTOM_UP)
    return normalize_heatmap(sal, HeatmapSource.BOTTOM_UP)
