"""Shared domain types, millisecond time handling, configuration and statistics."""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigError, ValidationError

TS_DIGITS = 13
MS_PER_DAY = 86_400_000
_MAX_TS = 10**TS_DIGITS - 1
_EPOCH_DAY = dt.date(1970, 1, 1)


class Modality(str, enum.Enum):
    IMAGE = "image"
    LIDAR = "lidar"
    GPS = "gps"

    @property
    def hot_dir(self) -> str:
        return {"image": "images", "lidar": "lidar", "gps": "gps"}[self.value]

    @property
    def ext(self) -> str:
        return {"image": "jpg", "lidar": "apc", "gps": "db"}[self.value]

    @classmethod
    def parse(cls, value: Union[str, "Modality"]) -> "Modality":
        try:
            return cls(value)
        except ValueError:
            raise ValidationError(f"unknown modality {value!r}") from None


FILE_MODALITIES = (Modality.IMAGE, Modality.LIDAR)


def check_ts(ts: int) -> int:
    if isinstance(ts, bool) or not isinstance(ts, (int, np.integer)):
        raise ValidationError(f"timestamp must be an integer, got {ts!r}")
    ts = int(ts)
    if ts < 0 or ts > _MAX_TS:
        raise ValidationError(f"timestamp {ts} outside [0, {_MAX_TS}]")
    return ts


def render_ts(ts: int) -> str:
    """Zero-padded 13-digit rendering used in file names."""
    return f"{check_ts(ts):0{TS_DIGITS}d}"


def parse_ts(text: str) -> int:
    if len(text) != TS_DIGITS or not text.isdigit():
        raise ValidationError(f"not a {TS_DIGITS}-digit timestamp: {text!r}")
    return int(text)


def day_of(ts: int) -> dt.date:
    """UTC calendar day containing ``ts``."""
    return _EPOCH_DAY + dt.timedelta(days=check_ts(ts) // MS_PER_DAY)


def day_start_ms(day: dt.date) -> int:
    return (day - _EPOCH_DAY).days * MS_PER_DAY


def day_bounds(day: dt.date) -> tuple[int, int]:
    """Inclusive millisecond bounds of a UTC day."""
    start = day_start_ms(day)
    return start, start + MS_PER_DAY - 1


def parse_day(text: str) -> dt.date:
    """Accepts ``YYYY-MM-DD`` or ``YYYY/MM/DD``."""
    try:
        return dt.date.fromisoformat(text.strip().replace("/", "-"))
    except ValueError:
        raise ValidationError(f"bad calendar day {text!r}") from None


def to_ms(when: Union[int, str]) -> int:
    """Parse a CLI time argument: integer milliseconds or an RFC 3339 string."""
    if isinstance(when, int):
        return check_ts(when)
    text = when.strip()
    if text.isdigit():
        return check_ts(int(text))
    try:
        parsed = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ValidationError(f"bad time {when!r}") from None
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=dt.timezone.utc)
    delta = parsed - dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)
    return check_ts(delta // dt.timedelta(milliseconds=1))


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: element ``ceil(p*n) - 1`` of the sorted samples."""
    if not samples:
        raise ValueError("percentile of an empty sample set")
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    ordered = sorted(samples)
    # round() guards against 0.07 * 100 == 7.000000000000001
    rank = math.ceil(round(p * len(ordered), 9))
    return ordered[max(rank, 1) - 1]


def summarize(samples: Sequence[float]) -> dict[str, float]:
    if not samples:
        return {"p50": 0.0, "p95": 0.0, "p99": 0.0}
    return {f"p{int(q * 100)}": percentile(samples, q) for q in (0.5, 0.95, 0.99)}


# --------------------------------------------------------------------------
# payloads


@dataclass(frozen=True)
class ImageBuffer:
    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"degenerate image {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ValidationError(
                f"pixel buffer has {len(self.pixels)} bytes, expected "
                f"{self.width * self.height * self.channels}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            raise ValidationError(f"image array must be uint8, got {arr.dtype}")
        if arr.ndim == 2:
            h, w = arr.shape
            c = 1
        elif arr.ndim == 3 and arr.shape[2] in (1, 3):
            h, w, c = arr.shape
        else:
            raise ValidationError(f"bad image array shape {arr.shape}")
        return cls(w, h, c, np.ascontiguousarray(arr).tobytes())

    def array(self) -> np.ndarray:
        """(height, width, channels) uint8 view."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, self.channels
        )

    @property
    def nbytes(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 4 float64 array of (x, y, z, intensity)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValidationError(f"point array must be N x 3 or N x 4, got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        bad = ~np.isfinite(pts[:, :3]).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite coordinate at point {int(np.argmax(bad))}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def raw_nbytes(self) -> int:
        """Size as KITTI float32 quadruplets."""
        return 16 * len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points)
        )

    __hash__ = None


@dataclass(frozen=True)
class GpsFix:
    ts: int
    lat: float
    lon: float
    alt: float

    def __post_init__(self):
        check_ts(self.ts)
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValidationError(f"latitude {self.lat} out of range")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise ValidationError(f"longitude {self.lon} out of range")
        if not math.isfinite(self.alt):
            raise ValidationError(f"altitude {self.alt} not finite")


Payload = Union[ImageBuffer, PointCloud, GpsFix]
_PAYLOAD_TYPES = {Modality.IMAGE: ImageBuffer, Modality.LIDAR: PointCloud, Modality.GPS: GpsFix}


@dataclass(frozen=True, eq=False)
class SensorFrame:
    modality: Modality
    ts: int
    payload: Payload

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        check_ts(self.ts)
        expected = _PAYLOAD_TYPES[self.modality]
        if not isinstance(self.payload, expected):
            raise ValidationError(
                f"{self.modality.value} frame carries {type(self.payload).__name__}"
            )
        if isinstance(self.payload, GpsFix) and self.payload.ts != self.ts:
            raise ValidationError("gps fix timestamp differs from frame timestamp")

    @property
    def raw_nbytes(self) -> int:
        if isinstance(self.payload, ImageBuffer):
            return self.payload.nbytes
        if isinstance(self.payload, PointCloud):
            return self.payload.raw_nbytes
        return 32


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EngineConfig:
    voxel_leaf_m: float = 0.2
    dedup_hamming_threshold: int = 2
    image_quality: int = 95
    point_quant_m: float = 0.001
    hot_root: Path = Path("data/hot")
    cold_root: Path = Path("data/cold")
    queue_capacity_per_modality: int = 64
    timezone: str = "UTC"
    # extensions beyond the core field set
    point_compression: str = "zlib"
    gps_commit_interval_ms: int = 100
    gps_commit_rows: int = 1
    orphan_policy: str = "reindex"
    hot_quota_bytes: int = 0
    cold_quota_bytes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hot_root", Path(self.hot_root))
        object.__setattr__(self, "cold_root", Path(self.cold_root))
        if not self.voxel_leaf_m > 0:
            raise ConfigError("voxel_leaf_m must be > 0")
        if not 0 <= self.dedup_hamming_threshold <= 64:
            raise ConfigError("dedup_hamming_threshold must be in [0, 64]")
        if not 0 <= self.image_quality <= 100:
            raise ConfigError("image_quality must be in [0, 100]")
        if not self.point_quant_m > 0:
            raise ConfigError("point_quant_m must be > 0")
        if self.queue_capacity_per_modality < 1:
            raise ConfigError("queue_capacity_per_modality must be >= 1")
        if self.timezone.upper() != "UTC":
            raise ConfigError("timezone is fixed to UTC")
        if self.orphan_policy not in ("reindex", "quarantine"):
            raise ConfigError("orphan_policy must be 'reindex' or 'quarantine'")
        if self.gps_commit_interval_ms <= 0 or self.gps_commit_rows < 1:
            raise ConfigError("gps group-commit window must be positive")
        if self.hot_quota_bytes < 0 or self.cold_quota_bytes < 0:
            raise ConfigError("quotas must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "EngineConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, fields[key], raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "EngineConfig":
        """File values first, then ``overrides`` (CLI flags) on top."""
        values: dict[str, str] = {}
        if path is not None:
            values.update(read_kv_file(path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)


def _coerce(key, f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    default = f.default
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def read_kv_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out

