"""Stream sources: a seeded synthetic generator and KITTI directory replay.

Synthetic images come in scenes. Every frame of a scene is the scene's base
pattern plus faint pixel noise, and consecutive scene bases are regenerated
until their hashes are far enough apart, so the number of frames a dedup
filter keeps is known in advance.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from ..codec.image import decode_image
from ..codec.points import read_kitti_bin
from ..core import GpsFix, ImageBuffer, Modality, PointCloud, SensorFrame, check_ts
from ..errors import ImageCodecError, ValidationError
from ..reduce import hamming64, phash64

DEFAULT_START_TS = 1_717_243_200_000  # 2024-06-01T12:00:00Z
_ORDER = {Modality.GPS: 0, Modality.LIDAR: 1, Modality.IMAGE: 2}
_STREAM = {Modality.IMAGE: 1, Modality.LIDAR: 2, Modality.GPS: 3}
_MAX_SCENE_TRIES = 64


def _default_rates() -> dict:
    return {Modality.IMAGE: 10.0, Modality.LIDAR: 10.0, Modality.GPS: 50.0}


@dataclass(frozen=True)
class SynthSpec:
    duration_s: float = 10.0
    rates: dict = field(default_factory=_default_rates)
    scene_period_s: float = 1.0
    cloud_points: int = 20_000
    image_size: tuple = (320, 240)  # width, height
    image_channels: int = 3
    start_ts: int = DEFAULT_START_TS
    dedup_tau: int = 2
    speed_mps: float = 10.0

    def __post_init__(self):
        rates = {Modality.parse(k): float(v) for k, v in self.rates.items()}
        if any(not r > 0 for r in rates.values()):
            raise ValidationError(f"rates must be > 0, got {rates}")
        object.__setattr__(self, "rates", rates)
        if self.duration_s < 0 or not self.scene_period_s > 0:
            raise ValidationError("duration_s must be >= 0 and scene_period_s > 0")
        if self.cloud_points < 0 or min(self.image_size) < 8:
            raise ValidationError("cloud_points >= 0 and images at least 8x8")
        if not 1 <= self.dedup_tau <= 32:
            raise ValidationError("dedup_tau must be in [1, 32]")
        check_ts(self.start_ts)

    def frame_count(self, modality) -> int:
        rate = self.rates.get(Modality.parse(modality))
        return 0 if rate is None else int(math.floor(self.duration_s * rate + 1e-9))

    def frame_ts(self, modality, i: int) -> int:
        return self.start_ts + int(round(i * 1000.0 / self.rates[Modality.parse(modality)]))

    def scene_of(self, ts: int) -> int:
        return int((ts - self.start_ts) // round(self.scene_period_s * 1000))

    @property
    def scene_count(self) -> int:
        n = self.frame_count(Modality.IMAGE)
        return 0 if n == 0 else self.scene_of(self.frame_ts(Modality.IMAGE, n - 1)) + 1


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, *stream])


def _pattern(rng: np.random.Generator, width: int, height: int, channels: int) -> np.ndarray:
    """Smooth random texture with a few hard-edged blocks."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    field_ = np.zeros((height, width))
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 4.0, size=2) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        field_ += rng.uniform(0.3, 1.0) * np.cos(fx * x / width + fy * y / height + phase)
    for _ in range(3):
        w, h = rng.integers(width // 8, width // 3), rng.integers(height // 8, height // 3)
        x0, y0 = rng.integers(0, width - w), rng.integers(0, height - h)
        field_[y0:y0 + h, x0:x0 + w] += rng.uniform(-1.5, 1.5)
    field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-9)
    base = field_ * 215 + 20
    if channels == 1:
        return np.clip(base, 0, 255).astype(np.uint8)
    tint = rng.uniform(0.7, 1.0, size=3)
    return np.clip(base[:, :, None] * tint[None, None, :], 0, 255).astype(np.uint8)


def _jitter(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noisy = base.astype(np.int16)
    mask = rng.random(base.shape) < 0.01
    noisy[mask] += rng.choice(np.array([-1, 1], dtype=np.int16), size=int(mask.sum()))
    return np.clip(noisy, 0, 255).astype(np.uint8)


class _SceneBook:
    """Scene bases generated on demand; each differs from its predecessor by >= tau bits."""

    def __init__(self, spec: SynthSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self._bases: list[tuple[np.ndarray, int]] = []

    def base(self, k: int) -> tuple[np.ndarray, int]:
        w, h = self.spec.image_size
        while len(self._bases) <= k:
            idx = len(self._bases)
            prev = self._bases[-1][1] if self._bases else None
            for attempt in range(_MAX_SCENE_TRIES):
                arr = _pattern(_rng(self.seed, 10, idx, attempt), w, h, self.spec.image_channels)
                h64 = phash64(ImageBuffer.from_array(arr))
                if prev is None or hamming64(h64, prev) >= self.spec.dedup_tau:
                    break
            else:
                raise ValidationError(f"could not build a distinct scene {idx}")
            self._bases.append((arr, h64))
        return self._bases[k]


def _image_frames(spec: SynthSpec, seed: int) -> Iterator[SensorFrame]:
    book = _SceneBook(spec, seed)
    current = None
    for i in range(spec.frame_count(Modality.IMAGE)):
        ts = spec.frame_ts(Modality.IMAGE, i)
        k = spec.scene_of(ts)
        base, base_hash = book.base(k)
        if k != current:
            # the scene opens on its exact base, which is the frame dedup keeps
            current = k
            img = ImageBuffer.from_array(base)
        else:
            img = ImageBuffer.from_array(_jitter(base, _rng(seed, _STREAM[Modality.IMAGE], i)))
            if hamming64(phash64(img), base_hash) >= spec.dedup_tau:
                img = ImageBuffer.from_array(base)
        yield SensorFrame(Modality.IMAGE, ts, img)


def synth_cloud(rng: np.random.Generator, n: int, x_offset: float = 0.0) -> np.ndarray:
    """Street-like scene in the sensor frame: ground, two facades, a few poles."""
    kinds = rng.choice(3, size=n, p=[0.6, 0.3, 0.1])
    pts = np.empty((n, 4))
    # ground: dense near the sensor, as a spinning scanner sees it
    g = kinds == 0
    r = 2.0 + 40.0 * rng.random(g.sum()) ** 3
    a = rng.uniform(0, 2 * np.pi, g.sum())
    pts[g, 0], pts[g, 1] = r * np.cos(a), r * np.sin(a)
    pts[g, 2] = -1.73 + 0.05 * np.sin(0.2 * (pts[g, 0] + x_offset))
    # facades at y = +/-9 m
    f = kinds == 1
    pts[f, 0] = rng.uniform(-25, 25, f.sum())
    pts[f, 1] = np.where(rng.random(f.sum()) < 0.5, -9.0, 9.0)
    pts[f, 2] = rng.uniform(-1.7, 4.0, f.sum())
    # poles every 15 m along the street, moving past the sensor
    p = kinds == 2
    pole = rng.integers(-3, 4, p.sum())
    px = pole * 15.0 - np.mod(x_offset, 15.0)
    ang = rng.uniform(0, 2 * np.pi, p.sum())
    pts[p, 0] = px + 0.15 * np.cos(ang)
    pts[p, 1] = 6.5 + 0.15 * np.sin(ang)
    pts[p, 2] = rng.uniform(-1.7, 4.0, p.sum())
    pts[:, :3] += rng.normal(0, 0.02, size=(n, 3))
    pts[:, 3] = np.clip(rng.beta(2, 5, n) + 0.2 * (kinds == 2), 0, 1)
    return pts


def _lidar_frames(spec: SynthSpec, seed: int) -> Iterator[SensorFrame]:
    for i in range(spec.frame_count(Modality.LIDAR)):
        ts = spec.frame_ts(Modality.LIDAR, i)
        x = spec.speed_mps * (ts - spec.start_ts) / 1000.0
        pts = synth_cloud(_rng(seed, _STREAM[Modality.LIDAR], i), spec.cloud_points, x)
        yield SensorFrame(Modality.LIDAR, ts, PointCloud(pts))


def _gps_frames(spec: SynthSpec, seed: int) -> Iterator[SensorFrame]:
    lat0, lon0 = 39.9042 + 0.01 * (seed % 7), 116.4074
    radius = 400.0
    for i in range(spec.frame_count(Modality.GPS)):
        ts = spec.frame_ts(Modality.GPS, i)
        t = (ts - spec.start_ts) / 1000.0
        theta = spec.speed_mps * t / radius
        noise = _rng(seed, _STREAM[Modality.GPS], i).normal(0, 0.02, 3)
        north = radius * math.sin(theta) + noise[0]
        east = radius * (math.cos(theta) - 1) + noise[1]
        fix = GpsFix(
            ts,
            lat0 + north / 111_320.0,
            lon0 + east / (111_320.0 * math.cos(math.radians(lat0))),
            45.0 + 0.5 * math.sin(0.05 * t) + noise[2],
        )
        yield SensorFrame(Modality.GPS, ts, fix)


def synth_source(spec: SynthSpec | None = None, seed: int = 0) -> Iterator[SensorFrame]:
    """All modalities merged in timestamp order; identical for identical seeds."""
    spec = spec or SynthSpec()
    makers = {Modality.IMAGE: _image_frames, Modality.LIDAR: _lidar_frames, Modality.GPS: _gps_frames}
    streams = [makers[m](spec, seed) for m in spec.rates]
    return heapq.merge(*streams, key=lambda f: (f.ts, _ORDER[f.modality]))


# --------------------------------------------------------------------------
# KITTI replay

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _sorted_files(directory, suffixes) -> list[Path]:
    if directory is None:
        return []
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in suffixes)


def _load_image(path: Path) -> ImageBuffer:
    try:
        return decode_image(path.read_bytes())
    except ImageCodecError as exc:
        raise ImageCodecError(f"undecodable image {path}: {exc}") from exc


def kitti_source(velodyne_dir=None, image_dir=None, rate_hz: float = 10.0,
                 start_ts: int = DEFAULT_START_TS) -> Iterator[SensorFrame]:
    """Replay KITTI-style directories in lexical order with synthetic timestamps."""
    if not rate_hz > 0:
        raise ValidationError(f"rate_hz must be > 0, got {rate_hz}")
    check_ts(start_ts)
    clouds = _sorted_files(velodyne_dir, (".bin",))
    images = _sorted_files(image_dir, IMAGE_SUFFIXES)

    def ts(i):
        return start_ts + int(round(i * 1000.0 / rate_hz))

    def lidar():
        for i, p in enumerate(clouds):
            yield SensorFrame(Modality.LIDAR, ts(i), read_kitti_bin(p))

    def camera():
        for i, p in enumerate(images):
            yield SensorFrame(Modality.IMAGE, ts(i), _load_image(p))

    return heapq.merge(lidar(), camera(), key=lambda f: (f.ts, _ORDER[f.modality]))
