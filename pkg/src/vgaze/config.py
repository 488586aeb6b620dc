"""Run-time tunables shared by the session, the harness and the CLI."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

from vgaze.temporal import frames_for_ms

ORIENTATIONS = ("Portrait", "LandscapeLeft", "LandscapeRight")


class ConfigError(ValueError):
    pass


_SCALAR_TYPES = {"int": (int,), "float": (int, float), "bool": (bool,), "str": (str,)}


def field_type_error(obj, prefix: str = "") -> str | None:
    """Describe the first dataclass field holding a value of the wrong scalar type, if any."""
    for f in fields(obj):
        value = getattr(obj, f.name)
        ftype = str(f.type)
        optional = ftype.endswith("| None")
        base = ftype.replace(" | None", "")
        if base not in _SCALAR_TYPES or (optional and value is None):
            continue
        ok = isinstance(value, _SCALAR_TYPES[base]) and (base == "bool" or not isinstance(value, bool))
        if not ok:
            return f"{prefix}{f.name}: expected {base}, got {value!r}"
    return None


@dataclass(frozen=True)
class RunConfig:
    bin_threshold: int = 128
    scs_threshold: float = 0.6
    window_n: int = 10
    cut_window_n: int = 5
    bottom_up_frames: int = 5
    # when set, overrides bottom_up_frames using the stream's nominal fps
    bottom_up_ms: float | None = None
    cut_hash_threshold: int = 10
    every_frame_is_key: bool = False
    zscore: bool = True
    zscore_alpha: float = 3.0
    cluster_epsilon: float = 0.1
    # None means ceil(window length / 3)
    cluster_min_size: int | None = None
    head_move_threshold: float = 0.005
    window_cap_multiplier: int = 4
    recalibration: bool = True
    orientation: str = "Portrait"
    landscape_kx: float = 0.002
    landscape_y_floor: float = 0.3
    landscape_cy: float = 0.03
    history: str | None = None
    # frames rejected on SCS still enter a window when past users' gaze exists for them
    history_admits_rejected: bool = True
    working_width: int = 68
    working_height: int = 68

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        problem = field_type_error(self)
        if problem:
            raise ConfigError(problem)

        def bad(name: str, why: str) -> ConfigError:
            return ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if not 0 <= self.bin_threshold <= 255:
            raise bad("bin_threshold", "must be in 0..255")
        if not 0.0 <= self.scs_threshold <= 1.0:
            raise bad("scs_threshold", "must be in [0, 1]")
        if self.window_n < 2:
            raise bad("window_n", "must be >= 2")
        if self.cut_window_n < 1:
            raise bad("cut_window_n", "must be >= 1")
        if self.bottom_up_frames < 0:
            raise bad("bottom_up_frames", "must be >= 0")
        if self.bottom_up_ms is not None and self.bottom_up_ms < 0:
            raise bad("bottom_up_ms", "must be >= 0")
        if not 0 <= self.cut_hash_threshold <= 64:
            raise bad("cut_hash_threshold", "must be in 0..64")
        if self.zscore_alpha <= 0:
            raise bad("zscore_alpha", "must be > 0")
        if self.cluster_epsilon <= 0:
            raise bad("cluster_epsilon", "must be > 0")
        if self.cluster_min_size is not None and self.cluster_min_size < 1:
            raise bad("cluster_min_size", "must be >= 1")
        if self.head_move_threshold < 0:
            raise bad("head_move_threshold", "must be >= 0")
        if self.window_cap_multiplier < 1:
            raise bad("window_cap_multiplier", "must be >= 1")
        if self.orientation not in ORIENTATIONS:
            raise bad("orientation", f"must be one of {', '.join(ORIENTATIONS)}")
        if self.working_width < 1 or self.working_height < 1:
            raise ConfigError("working_width/working_height: must be >= 1")

    def for_fps(self, fps: float) -> "RunConfig":
        """Resolve ``bottom_up_ms`` into a frame count for a stream at ``fps``."""
        if self.bottom_up_ms is None:
            return self
        return replace(self, bottom_up_frames=frames_for_ms(self.bottom_up_ms, fps))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean) if clean else self
