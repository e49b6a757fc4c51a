import hashlib

import numpy as np
import pytest

from avstore.core import ImageBuffer, Modality
from avstore.errors import CodecError, ValidationError
from avstore.ingest.sources import SynthSpec, kitti_source, synth_source
from avstore.reduce import DedupFilter
from oracles import phash_oracle, popcount


def digest(frames) -> str:
    h = hashlib.sha256()
    for f in frames:
        h.update(f"{f.modality.value}:{f.ts}:".encode())
        p = f.payload
        if f.modality is Modality.IMAGE:
            h.update(p.pixels)
        elif f.modality is Modality.LIDAR:
            h.update(p.points.tobytes())
        else:
            h.update(repr((p.lat, p.lon, p.alt)).encode())
    return h.hexdigest()


SMALL = dict(cloud_points=500, image_size=(64, 48))


def test_counts_for_ten_seconds():
    frames = list(synth_source(SynthSpec(duration_s=10, **SMALL), seed=0))
    counts = {m: sum(f.modality is m for f in frames) for m in Modality}
    assert counts == {Modality.IMAGE: 100, Modality.LIDAR: 100, Modality.GPS: 500}
    assert [f.ts for f in frames] == sorted(f.ts for f in frames)


def test_same_seed_same_stream():
    spec = SynthSpec(duration_s=2, **SMALL)
    assert digest(synth_source(spec, 7)) == digest(synth_source(spec, 7))
    assert digest(synth_source(spec, 7)) != digest(synth_source(spec, 8))


@pytest.mark.parametrize("k", [1, 3, 7])
def test_scene_count_is_dedup_ground_truth(k):
    spec = SynthSpec(duration_s=k, rates={Modality.IMAGE: 10}, image_size=(64, 48))
    frames = list(synth_source(spec, seed=k))
    assert spec.scene_count == k
    filt = DedupFilter(2)
    kept = [f for f in frames if filt.offer(f.payload).keep]
    assert len(kept) == k
    # the oracle agrees on the construction: consecutive scene openers differ by >= 2 bits
    openers = [f.payload for f in frames if (f.ts - spec.start_ts) % 1000 == 0]
    hashes = [phash_oracle(i.pixels, i.width, i.height, i.channels) for i in openers]
    assert all(popcount(a ^ b) >= 2 for a, b in zip(hashes, hashes[1:]))


def test_spec_validation():
    with pytest.raises(ValidationError):
        SynthSpec(rates={Modality.IMAGE: 0})
    with pytest.raises(ValidationError):
        SynthSpec(image_size=(4, 4))


def test_kitti_replay(tmp_path):
    velo, img = tmp_path / "velodyne", tmp_path / "image_02"
    velo.mkdir()
    img.mkdir()
    rows = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.25], [-1, -2, -3, 0], [0.5, 0.5, 0.5, 1]], dtype="<f4")
    for i in range(3):
        (velo / f"{i:06d}.bin").write_bytes((rows + i).astype("<f4").tobytes())
    from PIL import Image
    for i in range(2):
        Image.fromarray(np.full((10, 10, 3), 40 * i, dtype=np.uint8)).save(img / f"{i:06d}.png")
    frames = list(kitti_source(velo, img, rate_hz=10, start_ts=1_000_000))
    lidar = [f for f in frames if f.modality is Modality.LIDAR]
    assert [f.ts for f in lidar] == [1_000_000, 1_000_100, 1_000_200]
    assert lidar[0].payload.points.tolist() == rows.astype(np.float64).tolist()
    images = [f.payload for f in frames if f.modality is Modality.IMAGE]
    assert len(images) == 2 and isinstance(images[0], ImageBuffer)


def test_kitti_empty_and_malformed(tmp_path):
    assert list(kitti_source(tmp_path, None)) == []
    (tmp_path / "000000.bin").write_bytes(bytes(65))
    with pytest.raises(CodecError, match="000000.bin"):
        list(kitti_source(tmp_path, None))
