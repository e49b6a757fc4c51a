"""Image codec adapter. JPEG comes from Pillow; nothing here re-implements it."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..core import ImageBuffer
from ..errors import ImageCodecError, ValidationError

_MODES = {1: "L", 3: "RGB"}


def _to_pil(img: ImageBuffer) -> Image.Image:
    arr = img.array()
    return Image.fromarray(arr[:, :, 0] if img.channels == 1 else arr, mode=_MODES[img.channels])


class JpegCodec:
    name = "jpeg"
    ext = "jpg"

    def encode(self, img: ImageBuffer, quality: int, ts: int | None = None) -> bytes:
        if not 0 <= quality <= 100:
            raise ValidationError(f"quality must be in [0, 100], got {quality}")
        buf = io.BytesIO()
        try:
            # fixed subsampling keeps output identical across Pillow defaults
            _to_pil(img).save(buf, format="JPEG", quality=quality, subsampling=2, optimize=False)
        except (OSError, ValueError) as exc:
            raise ImageCodecError(f"JPEG encode failed: {exc}", ts=ts) from exc
        return buf.getvalue()

    def decode(self, data: bytes, ts: int | None = None) -> ImageBuffer:
        try:
            with Image.open(io.BytesIO(data)) as pil:
                pil.load()
                if pil.mode not in ("L", "RGB"):
                    pil = pil.convert("RGB")
                arr = np.asarray(pil, dtype=np.uint8)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            raise ImageCodecError(f"image decode failed: {exc}", ts=ts) from exc
        return ImageBuffer.from_array(arr)


CODECS = {"jpeg": JpegCodec()}
DEFAULT_CODEC = CODECS["jpeg"]


def encode_image(img: ImageBuffer, quality: int = 95, ts: int | None = None) -> bytes:
    return DEFAULT_CODEC.encode(img, quality, ts=ts)


def decode_image(data: bytes, ts: int | None = None) -> ImageBuffer:
    return DEFAULT_CODEC.decode(data, ts=ts)


def png_size(img: ImageBuffer) -> int:
    """Lossless baseline size used for compression ratios."""
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.tell()


@dataclass(frozen=True)
class ImageCodecSample:
    encode_ms: float
    encoded_bytes: int
    baseline_bytes: int

    @property
    def ratio(self) -> float:
        return self.baseline_bytes / self.encoded_bytes


def measure_encode(img: ImageBuffer, quality: int, baseline_bytes: int | None = None) -> ImageCodecSample:
    if baseline_bytes is None:
        baseline_bytes = png_size(img)
    t0 = time.perf_counter()
    data = encode_image(img, quality)
    return ImageCodecSample((time.perf_counter() - t0) * 1e3, len(data), baseline_bytes)
