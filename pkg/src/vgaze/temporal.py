"""Temporal saliency: perceptual hashing, key-frame scene cuts and attention hand-over."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn

from vgaze.heatmap import Frame, area_resize

HASH_INPUT_SIZE = 32
HASH_BLOCK = 8
DEFAULT_CUT_THRESHOLD = 10
DEFAULT_BOTTOM_UP_FRAMES = 5
BOTTOM_UP_MS = 150.0


class Attention(enum.Enum):
    BOTTOM_UP = "BottomUp"
    TOP_DOWN = "TopDown"


@dataclass(frozen=True)
class PerceptualHash:
    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits < 1 << 64:
            raise ValueError("perceptual hash must fit in 64 bits")

    def __str__(self) -> str:
        return f"{self.bits:016x}"


@dataclass(frozen=True)
class AttentionMode:
    mode: Attention
    since_cut_frames: int


def phash(frame: Frame) -> PerceptualHash:
    """DCT perceptual hash of a frame.

    The frame is box-filtered to 32x32 and transformed with an orthonormal
    2D DCT-II. The 63 AC coefficients of the low-frequency 8x8 block plus the
    coefficient at (0, 8) are compared against their median; bits are packed
    row-major with the first coefficient as the most significant bit. The DC
    term is left out, so a uniform brightness shift leaves the hash unchanged.
    """
    small = area_resize(frame.pixels, HASH_INPUT_SIZE, HASH_INPUT_SIZE)
    coeffs = dctn(small, type=2, norm="ortho")
    selected = np.append(coeffs[:HASH_BLOCK, :HASH_BLOCK].ravel()[1:], coeffs[0, HASH_BLOCK])
    above = selected > np.median(selected)
    bits = 0
    for b in above:
        bits = (bits << 1) | int(b)
    return PerceptualHash(bits)


def hamming(a: PerceptualHash, b: PerceptualHash) -> int:
    return bin(a.bits ^ b.bits).count("1")


def detect_scene_cut(prev: Frame, key: Frame, cut_threshold: int = DEFAULT_CUT_THRESHOLD) -> bool:
    """True when the hash distance between ``prev`` and ``key`` exceeds the threshold."""
    return hamming(phash(prev), phash(key)) > cut_threshold


def attention_mode(since_cut_frames: int, bottom_up_window: int = DEFAULT_BOTTOM_UP_FRAMES) -> AttentionMode:
    if since_cut_frames < 0 or bottom_up_window < 0:
        raise ValueError("frame counts must be non-negative")
    mode = Attention.BOTTOM_UP if since_cut_frames < bottom_up_window else Attention.TOP_DOWN
    return AttentionMode(mode, since_cut_frames)


def frames_for_ms(ms: float, fps: float) -> int:
    """Number of whole frames needed to cover ``ms`` at ``fps`` (150 ms at 30 fps -> 5)."""
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    return max(1, math.ceil(ms * fps / 1000.0 - 1e-9))


class AttentionScheduler:
    """Tracks frames since the last scene cut.

    The stream start is not treated as a cut: there is no predecessor to
    compare against, so the scheduler starts in top-down mode.
    """

    def __init__(
        self,
        bottom_up_window: int = DEFAULT_BOTTOM_UP_FRAMES,
        cut_threshold: int = DEFAULT_CUT_THRESHOLD,
        every_frame_is_key: bool = False,
    ) -> None:
        self.bottom_up_window = bottom_up_window
        self.cut_threshold = cut_threshold
        self.every_frame_is_key = every_frame_is_key
        self.since_cut = bottom_up_window
        self._prev: Frame | None = None
        self._prev_hash: PerceptualHash | None = None

    @property
    def mode(self) -> AttentionMode:
        return attention_mode(self.since_cut, self.bottom_up_window)

    def observe(self, frame: Frame) -> bool:
        """Advance to ``frame``; returns True if it is a detected scene cut."""
        cut = False
        if self._prev is not None:
            self.since_cut += 1
            if frame.is_key_frame or self.every_frame_is_key:
                if self._prev_hash is None:
                    self._prev_hash = phash(self._prev)
                key_hash = phash(frame)
                cut = hamming(self._prev_hash, key_hash) > self.cut_threshold
                self._prev_hash = key_hash
            else:
                self._prev_hash = None
        if cut:
            self.since_cut = 0
        self._prev = frame
        return cut
