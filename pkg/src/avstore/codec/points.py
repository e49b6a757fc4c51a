"""APC point-cloud codec: quantize, Morton-sort, delta, zigzag, varint, then a
general-purpose lossless stage.

Container layout (little-endian)::

    magic "APC1" | u8 version | u8 flags | u64 point_count | f64 quant_m |
    6 x f64 bounds (min xyz, max xyz) | body

flags bit 0: intensity present; bits 1-3: lossless stage id.
The body (after the lossless stage is undone) is the coordinate varint
stream followed by one intensity byte per point.
"""

from __future__ import annotations

import lzma
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import PointCloud
from ..errors import CodecError, ValidationError

MAGIC = b"APC1"
VERSION = 1
HEADER = struct.Struct("<4sBBQd6d")
FLAG_INTENSITY = 0x01
_STAGE_SHIFT = 1
_STAGE_MASK = 0x0E
COORD_LIMIT = 1 << 30
_MAX_VARINT = 10


def _zlib_decompress(body: bytes) -> bytes:
    d = zlib.decompressobj()
    try:
        out = d.decompress(body)
    except zlib.error as exc:
        raise CodecError(f"corrupt zlib body: {exc}") from exc
    if not d.eof or d.unused_data:
        raise CodecError("truncated or padded zlib body")
    return out


def _lzma_decompress(body: bytes) -> bytes:
    d = lzma.LZMADecompressor()
    try:
        out = d.decompress(body)
    except lzma.LZMAError as exc:
        raise CodecError(f"corrupt lzma body: {exc}") from exc
    if not d.eof or d.unused_data:
        raise CodecError("truncated or padded lzma body")
    return out


# id -> (name, compress, decompress)
STAGES = {
    0: ("identity", bytes, bytes),
    1: ("zlib", lambda b: zlib.compress(b, 6), _zlib_decompress),
    2: ("lzma", lambda b: lzma.compress(b, preset=1), _lzma_decompress),
}
_STAGE_IDS = {name: sid for sid, (name, _, _) in STAGES.items()}


@dataclass(frozen=True)
class PointCodecParams:
    quant_m: float = 0.001
    includes_intensity: bool = True
    stage: str = "zlib"

    def __post_init__(self):
        if not (self.quant_m > 0 and np.isfinite(self.quant_m)):
            raise ValidationError(f"quant_m must be > 0, got {self.quant_m}")
        if self.stage not in _STAGE_IDS:
            raise ValidationError(f"unknown lossless stage {self.stage!r}")


@dataclass(frozen=True)
class EncodedCloud:
    version: int
    flags: int
    point_count: int
    quant_m: float
    bounds: tuple
    body: bytes

    @property
    def has_intensity(self) -> bool:
        return bool(self.flags & FLAG_INTENSITY)

    @property
    def stage_id(self) -> int:
        return (self.flags & _STAGE_MASK) >> _STAGE_SHIFT

    def to_bytes(self) -> bytes:
        return (
            HEADER.pack(MAGIC, self.version, self.flags, self.point_count, self.quant_m, *self.bounds)
            + self.body
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedCloud":
        if len(data) < HEADER.size:
            raise CodecError(f"APC header truncated ({len(data)} < {HEADER.size} bytes)")
        magic, version, flags, count, quant, *bounds = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CodecError(f"bad APC magic {magic!r}")
        if version != VERSION:
            raise CodecError(f"unsupported APC version {version}")
        if not (quant > 0 and np.isfinite(quant)):
            raise CodecError(f"bad quantization step {quant}")
        return cls(version, flags, count, quant, tuple(bounds), bytes(data[HEADER.size:]))


# --------------------------------------------------------------------------
# integer plumbing


def quantize(values: np.ndarray, quant_m: float) -> np.ndarray:
    """Round-half-away-from-zero onto multiples of ``quant_m``.

    Ties are judged with a 1e-9 step tolerance so decimal inputs such as
    1.0005 at 1 mm land on the half they were written as.
    """
    scaled = np.asarray(values, dtype=np.float64) / quant_m
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5 + 1e-9)).astype(np.int64)


def zigzag(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.int64)
    return ((v << 1) ^ (v >> 63)).view(np.uint64)


def unzigzag(u: np.ndarray) -> np.ndarray:
    u = u.astype(np.uint64)
    return (u >> np.uint64(1)).view(np.int64) ^ -(u & np.uint64(1)).view(np.int64)


_VARINT_LIMITS = np.array([1 << (7 * k) for k in range(1, _MAX_VARINT)], dtype=np.uint64)


def varint_encode(values: np.ndarray) -> bytes:
    """LEB128 encoding of an array of uint64."""
    u = np.asarray(values, dtype=np.uint64)
    if len(u) == 0:
        return b""
    nbytes = np.searchsorted(_VARINT_LIMITS, u, side="right") + 1
    ends = np.cumsum(nbytes)
    starts = ends - nbytes
    out = np.empty(int(ends[-1]), dtype=np.uint8)
    for k in range(int(nbytes.max())):
        sel = nbytes > k
        group = ((u[sel] >> np.uint64(7 * k)) & np.uint64(0x7F)).astype(np.uint8)
        group[nbytes[sel] > k + 1] |= 0x80
        out[starts[sel] + k] = group
    return out.tobytes()


def varint_decode(data: bytes, count: int) -> np.ndarray:
    """Decode exactly ``count`` varints spanning all of ``data``."""
    if count == 0:
        if data:
            raise CodecError(f"{len(data)} trailing bytes in varint stream")
        return np.empty(0, dtype=np.uint64)
    b = np.frombuffer(data, dtype=np.uint8)
    if len(b) == 0 or b[-1] & 0x80:
        raise CodecError("varint stream truncated")
    ends = np.flatnonzero((b & 0x80) == 0)
    if len(ends) != count:
        raise CodecError(f"varint stream holds {len(ends)} values, header says {count}")
    starts = np.concatenate([[0], ends[:-1] + 1])
    lengths = ends - starts + 1
    if lengths.max() > _MAX_VARINT:
        raise CodecError("varint longer than 10 bytes")
    pos = np.arange(len(b)) - np.repeat(starts, lengths)
    parts = (b & 0x7F).astype(np.uint64) << (7 * pos).astype(np.uint64)
    return np.add.reduceat(parts, starts)


_SPREAD_STEPS = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)


def _spread3(v: np.ndarray, nbits: int) -> np.ndarray:
    """Insert two zero bits between each of the low ``nbits`` (<= 21) bits."""
    out = v.astype(np.uint64) & np.uint64((1 << nbits) - 1)
    for shift, mask in _SPREAD_STEPS:
        out = (out | (out << np.uint64(shift))) & np.uint64(mask)
    return out


def morton_order(q: np.ndarray, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Stable permutation sorting integer triples by Morton (Z-order) code.

    Coordinates are offset to be non-negative (31 bits per axis); the 93-bit
    code is split into a 45-bit high word and a 48-bit low word.
    """
    if len(q) == 0:
        return np.empty(0, dtype=np.int64)
    u = (q - q.min(axis=0)).astype(np.uint64)
    lo_mask = np.uint64(0xFFFF)
    hi = lo = np.zeros(len(q), dtype=np.uint64)
    for axis in range(3):
        lo = lo | (_spread3(u[:, axis] & lo_mask, 16) << np.uint64(axis))
        hi = hi | (_spread3(u[:, axis] >> np.uint64(16), 15) << np.uint64(axis))
    keys = [lo, hi] if tiebreak is None else [tiebreak, lo, hi]
    return np.lexsort(keys)


# --------------------------------------------------------------------------
# codec


def encode_points(cloud: PointCloud, params: PointCodecParams | None = None) -> EncodedCloud:
    params = params or PointCodecParams()
    xyz = cloud.xyz
    n = len(xyz)
    limit = COORD_LIMIT * params.quant_m
    over = np.abs(xyz) >= limit
    if over.any():
        idx = int(np.flatnonzero(over.any(axis=1))[0])
        raise ValidationError(
            f"point {idx} has coordinate {xyz[idx].tolist()} outside +/-{limit} m"
        )

    flags = _STAGE_IDS[params.stage] << _STAGE_SHIFT
    if params.includes_intensity:
        flags |= FLAG_INTENSITY
    if n == 0:
        return EncodedCloud(VERSION, flags, 0, params.quant_m, (0.0,) * 6, b"")

    q = quantize(xyz, params.quant_m)
    inten = np.rint(np.clip(cloud.intensity, 0.0, 1.0) * 255).astype(np.uint8)
    order = morton_order(q, inten if params.includes_intensity else None)
    q = q[order]
    deltas = np.diff(q, axis=0, prepend=np.zeros((1, 3), dtype=np.int64))
    raw = varint_encode(zigzag(deltas.ravel()))
    if params.includes_intensity:
        raw += inten[order].tobytes()

    bounds = tuple(float(v) for v in np.concatenate([xyz.min(axis=0), xyz.max(axis=0)]))
    body = STAGES[_STAGE_IDS[params.stage]][1](raw)
    return EncodedCloud(VERSION, flags, n, params.quant_m, bounds, body)


def decode_points(enc: EncodedCloud | bytes) -> PointCloud:
    if isinstance(enc, (bytes, bytearray, memoryview)):
        enc = EncodedCloud.from_bytes(bytes(enc))
    n = enc.point_count
    if n == 0:
        if enc.body:
            raise CodecError("empty cloud with a non-empty body")
        return PointCloud(np.empty((0, 4)))
    if enc.stage_id not in STAGES:
        raise CodecError(f"unknown lossless stage id {enc.stage_id}")
    raw = STAGES[enc.stage_id][2](enc.body)
    per_point = 4 if enc.has_intensity else 3
    if len(raw) < per_point * n:
        raise CodecError(f"body of {len(raw)} bytes cannot hold {n} points")
    coord_bytes = raw[:-n] if enc.has_intensity else raw
    deltas = unzigzag(varint_decode(coord_bytes, 3 * n)).reshape(n, 3)
    q = np.cumsum(deltas, axis=0)
    out = np.zeros((n, 4))
    out[:, :3] = q * enc.quant_m
    if enc.has_intensity:
        out[:, 3] = np.frombuffer(raw[-n:], dtype=np.uint8) / 255.0
    return PointCloud(out)


# --------------------------------------------------------------------------
# raw pass-through (KITTI velodyne .bin)


def read_kitti_bin(path) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    if len(data) % 16:
        raise CodecError(f"malformed KITTI file {path}: {len(data)} bytes is not a multiple of 16")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    try:
        return PointCloud(pts)
    except ValidationError as exc:
        raise CodecError(f"malformed KITTI file {path}: {exc}") from exc


def kitti_bytes(cloud: PointCloud) -> bytes:
    return cloud.points.astype("<f4").tobytes()
