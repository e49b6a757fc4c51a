"""Modality-aware data reduction.

Point clouds are thinned with a voxel grid (one centroid per occupied cell).
Camera frames are deduplicated with a 64-bit DCT perceptual hash: a frame
whose hash lies within ``tau`` bits of the last kept frame is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .core import ImageBuffer, PointCloud
from .errors import ValidationError

HASH_SIZE = 32
LOW_FREQ = 8
ALL_ONES = (1 << 64) - 1

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int


def voxel_keys(xyz: np.ndarray, leaf_m: float) -> np.ndarray:
    """Half-open cell index ``floor(coord / leaf)`` per axis, as int64."""
    return np.floor(np.asarray(xyz, dtype=np.float64) / leaf_m).astype(np.int64)


def voxel_downsample(cloud: PointCloud, leaf_m: float) -> PointCloud:
    """Replace the points of every occupied voxel with their centroid.

    Intensity is averaged alongside position. Output is sorted by voxel key
    (ix, iy, iz) lexicographically.
    """
    if not leaf_m > 0:
        raise ValidationError(f"voxel leaf must be > 0, got {leaf_m}")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(np.empty((0, 4)))

    keys = voxel_keys(pts[:, :3], leaf_m)
    uniq, inverse = _unique_rows(keys)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    # average offsets from one member point per voxel; summing raw coordinates
    # lets rounding drift grow with the point count
    anchor_idx = np.empty(len(uniq), dtype=np.int64)
    anchor_idx[inverse[::-1]] = np.arange(len(pts))[::-1]
    anchor = pts[anchor_idx]
    offsets = pts - anchor[inverse]
    out = np.empty((len(uniq), 4))
    for col in range(4):
        out[:, col] = anchor[:, col] + np.bincount(inverse, weights=offsets[:, col],
                                                   minlength=len(uniq)) / counts

    _clamp_into_cells(out[:, :3], uniq, leaf_m, anchor[:, :3])
    return PointCloud(out)


def _unique_rows(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lexicographically sorted unique key rows and the inverse mapping."""
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2.0**62:
        # pack each row into one int64 whose order is the lexicographic order
        shifted = keys - lo
        flat = (shifted[:, 0] * span[1] + shifted[:, 1]) * span[2] + shifted[:, 2]
        _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
        return keys[first], inverse.reshape(-1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def _clamp_into_cells(centroids: np.ndarray, keys: np.ndarray, leaf_m: float,
                      inside: np.ndarray) -> None:
    # Mathematically a centroid lies inside its cell; float rounding can push
    # one across a face. Step such coordinates back one ulp at a time, and in
    # the last resort take the coordinate of a member point, which is inside.
    for _ in range(64):
        got = voxel_keys(centroids, leaf_m)
        off = got != keys
        if not off.any():
            return
        direction = np.where(got[off] > keys[off], -np.inf, np.inf)
        centroids[off] = np.nextafter(centroids[off], direction)
    off = voxel_keys(centroids, leaf_m) != keys
    centroids[off] = inside[off]


# --------------------------------------------------------------------------
# DCT


@lru_cache(maxsize=8)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis: ``M[u, x] = a(u) cos((2x+1) u pi / 2n)``."""
    u = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos((2 * x + 1) * u * np.pi / (2 * n))
    scale = np.full(n, np.sqrt(2.0 / n))
    scale[0] = np.sqrt(1.0 / n)
    m = m * scale[:, None]
    m.setflags(write=False)
    return m


def dct2(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DCT-II of a square block; ``F[0, 0] == n * mean``."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ValidationError(f"dct2 needs a square 2D block, got {block.shape}")
    m = dct_matrix(block.shape[0])
    return m @ block @ m.T


def dct2_32(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != (HASH_SIZE, HASH_SIZE):
        raise ValidationError(f"expected a 32x32 single-channel block, got {image.shape}")
    return dct2(image)


# --------------------------------------------------------------------------
# perceptual hash


def to_gray(img: ImageBuffer) -> np.ndarray:
    arr = img.array().astype(np.float64)
    if img.channels == 1:
        return arr[:, :, 0]
    return arr @ _LUMA


@lru_cache(maxsize=64)
def _area_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic (dst x src) matrix of pixel-overlap fractions."""
    edges_out = np.arange(dst + 1) * (src / dst)
    lo = np.maximum(edges_out[:-1, None], np.arange(src)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, src + 1)[None, :])
    w = np.clip(hi - lo, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def box_resize(gray: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average resample of a 2D array."""
    h, w = gray.shape
    return _area_weights(h, height) @ gray @ _area_weights(w, width).T


def phash64(img: ImageBuffer) -> int:
    """64-bit perceptual hash; bit i is coefficient i of the 8x8 block, row-major.

    The threshold is the mean of the 63 AC coefficients. Coefficients within
    rounding noise of the threshold count as ``>=``, so a constant image hashes
    to all ones regardless of float error in the transform.
    """
    small = box_resize(to_gray(img), HASH_SIZE, HASH_SIZE)
    coeffs = dct2_32(small)[:LOW_FREQ, :LOW_FREQ].ravel()
    mu = coeffs[1:].mean()
    tol = 1e-9 * max(1.0, abs(coeffs[0]))
    bits = coeffs >= mu - tol
    return sum(1 << i for i, bit in enumerate(bits) if bit)


def hamming64(a: int, b: int) -> int:
    return bin((a ^ b) & ALL_ONES).count("1")


class DedupDecision(NamedTuple):
    keep: bool
    distance: int | None
    hash: int
    reduction_ratio: float


@dataclass
class DedupFilter:
    """Stateful near-duplicate filter for one camera stream.

    A frame is dropped when its hash is fewer than ``tau`` bits away from the
    last *kept* frame, so slow drift cannot sneak an endless run through.
    """

    tau: int = 2
    anchor: int | None = None
    seen: int = 0
    kept: int = 0

    def __post_init__(self):
        if not 0 <= self.tau <= 64:
            raise ValidationError(f"tau must be in [0, 64], got {self.tau}")

    @property
    def dropped(self) -> int:
        return self.seen - self.kept

    @property
    def reduction_ratio(self) -> float:
        return self.dropped / self.seen if self.seen else 0.0

    def offer_hash(self, h: int) -> DedupDecision:
        self.seen += 1
        distance = None if self.anchor is None else hamming64(h, self.anchor)
        keep = distance is None or distance >= self.tau
        if keep:
            self.kept += 1
            self.anchor = h
        return DedupDecision(keep, distance, h, self.reduction_ratio)

    def offer(self, img: ImageBuffer) -> DedupDecision:
        return self.offer_hash(phash64(img))


def dedup_filter(frames: Iterable[ImageBuffer], tau: int = 2) -> Iterator[DedupDecision]:
    filt = DedupFilter(tau)
    for img in frames:
        yield filt.offer(img)
