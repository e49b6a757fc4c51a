import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from avstore.codec.points import (
    EncodedCloud,
    PointCodecParams,
    decode_points,
    encode_points,
    kitti_bytes,
    morton_order,
    quantize,
    read_kitti_bin,
    unzigzag,
    varint_decode,
    varint_encode,
    zigzag,
)
from avstore.core import PointCloud
from avstore.errors import CodecError, ValidationError
from avstore.ingest.sources import synth_cloud
from oracles import leb128, morton_oracle, round_half_away, zigzag_oracle

Q = 0.001


def max_axis_error(src: PointCloud, out: PointCloud) -> float:
    # the codec reorders points, so compare after quantising both to one canonical order
    a = src.xyz[np.lexsort(quantize(src.xyz, Q).T[::-1])]
    b = out.xyz[np.lexsort(quantize(out.xyz, Q).T[::-1])]
    return float(np.abs(a - b).max()) if len(a) else 0.0


def test_single_point_example():
    cloud = PointCloud(np.array([[1.0005, 0.0, -2.0004, 0.5]]))
    assert [round_half_away(v / Q) for v in (1.0, 0.0, -2.0004)] == [1000, 0, -2000]
    assert quantize(cloud.xyz, Q).tolist() == [[1001, 0, -2000]]
    out = decode_points(encode_points(cloud).to_bytes())
    np.testing.assert_allclose(out.xyz, [[1.001, 0.0, -2.0]], atol=1e-12)
    assert np.abs(out.xyz - cloud.xyz).max() <= Q / 2 + 1e-12


def test_quantize_matches_round_half_away_away_from_ties():
    rng = np.random.default_rng(0)
    vals = rng.uniform(-100, 100, 5000)
    assert quantize(vals, Q).tolist() == [round_half_away(v / Q) for v in vals]


def test_empty_cloud():
    enc = encode_points(PointCloud(np.empty((0, 4))))
    assert enc.point_count == 0 and enc.body == b""
    assert len(decode_points(enc.to_bytes())) == 0


def test_random_cube_round_trip():
    rng = np.random.default_rng(1)
    pts = np.hstack([rng.uniform(-100, 100, (10_000, 3)), rng.random((10_000, 1))])
    cloud = PointCloud(pts)
    out = decode_points(encode_points(cloud).to_bytes())
    assert len(out) == len(cloud)
    assert max_axis_error(cloud, out) <= Q / 2


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(0, 2000), st.just(3)),
                  elements=st.floats(-500, 500, allow_nan=False)))
def test_round_trip_property(xyz):
    cloud = PointCloud(xyz)
    out = decode_points(encode_points(cloud))
    assert len(out) == len(cloud)
    assert max_axis_error(cloud, out) <= Q / 2 + 1e-9


def test_intensity_quantised_to_bytes():
    pts = np.array([[0, 0, 0, 0.0], [1, 0, 0, 1.0], [2, 0, 0, 0.5]])
    out = decode_points(encode_points(PointCloud(pts)))
    assert sorted(out.intensity.tolist()) == [0.0, 128 / 255, 1.0]
    no_i = decode_points(encode_points(PointCloud(pts), PointCodecParams(includes_intensity=False)))
    assert not no_i.intensity.any()


@pytest.mark.parametrize("stage", ["identity", "zlib", "lzma"])
def test_every_lossless_stage_round_trips(stage):
    rng = np.random.default_rng(2)
    cloud = PointCloud(rng.uniform(-10, 10, (500, 4)).clip(-10, 10) * [1, 1, 1, 0.05])
    out = decode_points(encode_points(cloud, PointCodecParams(stage=stage)).to_bytes())
    assert max_axis_error(cloud, out) <= Q / 2


def test_out_of_range_names_point_index():
    pts = np.zeros((5, 4))
    pts[3, 1] = 2e6
    with pytest.raises(ValidationError, match="point 3"):
        encode_points(PointCloud(pts))


def test_truncation_is_a_structured_error():
    rng = np.random.default_rng(3)
    data = encode_points(PointCloud(rng.uniform(-5, 5, (300, 4)))).to_bytes()
    for cut in (1, 2, 17, len(data) - 1, len(data) - 60):
        with pytest.raises(CodecError):
            decode_points(data[:cut])
    for cut in range(1, 40):
        with pytest.raises(CodecError):
            decode_points(data[:-cut])
    with pytest.raises(CodecError):
        decode_points(b"XXXX" + data[4:])


def test_decode_is_deterministic_and_order_free():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-20, 20, (3000, 4)).clip(0, None)
    a = encode_points(PointCloud(pts)).to_bytes()
    b = encode_points(PointCloud(pts[rng.permutation(len(pts))])).to_bytes()
    assert a == b
    assert decode_points(a) == decode_points(b)


def test_synthetic_scan_compresses_below_sixty_percent():
    cloud = PointCloud(synth_cloud(np.random.default_rng(5), 20_000, 0.0))
    enc = encode_points(cloud).to_bytes()
    assert len(enc) <= 0.6 * len(kitti_bytes(cloud))


# -- integer plumbing against plain-Python references ------------------------


@given(st.lists(st.integers(-(2**62), 2**62), max_size=200))
def test_zigzag_matches_oracle(vals):
    arr = np.array(vals, dtype=np.int64)
    z = zigzag(arr)
    assert z.tolist() == [zigzag_oracle(v) for v in vals]
    assert unzigzag(z).tolist() == vals


@given(st.lists(st.integers(0, 2**64 - 1), max_size=200))
def test_varint_matches_leb128(vals):
    data = varint_encode(np.array(vals, dtype=np.uint64))
    assert data == b"".join(leb128(v) for v in vals)
    assert varint_decode(data, len(vals)).tolist() == vals


def test_varint_known_bytes():
    assert varint_encode(np.array([300], dtype=np.uint64)).hex() == "ac02"
    assert varint_encode(np.array([2**64 - 1], dtype=np.uint64)).hex() == "ffffffffffffffffff01"


@given(st.lists(st.tuples(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1),
                          st.integers(0, 2**31 - 1)), min_size=1, max_size=100))
def test_morton_order_matches_bit_interleave(triples):
    q = np.array(triples, dtype=np.int64)
    # offset by the per-axis minimum as the codec does
    shifted = [tuple(int(v) for v in row) for row in (q - q.min(axis=0))]
    codes = [morton_oracle(*t) for t in shifted]
    expected = sorted(range(len(triples)), key=lambda i: (codes[i], i))
    assert morton_order(q).tolist() == expected


# -- KITTI binaries -------------------------------------------------------------


def test_hand_written_kitti_file(tmp_path):
    rows = [[1.0, 2.0, 3.0, 0.25], [-1.5, 0.0, 0.5, 1.0], [10.0, -20.0, 0.125, 0.0], [0, 0, 0, 0.5]]
    path = tmp_path / "0000.bin"
    path.write_bytes(np.array(rows, dtype="<f4").tobytes())
    assert path.stat().st_size == 64
    cloud = read_kitti_bin(path)
    assert cloud.points.tolist() == rows
    assert kitti_bytes(cloud) == path.read_bytes()


def test_malformed_kitti_file_named(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(65))
    with pytest.raises(CodecError, match="bad.bin"):
        read_kitti_bin(path)


def test_header_fields():
    enc = encode_points(PointCloud(np.array([[1.0, 2.0, 3.0, 0.0], [-1.0, 0.0, 5.0, 0.0]])))
    parsed = EncodedCloud.from_bytes(enc.to_bytes())
    assert parsed == enc
    assert parsed.bounds == (-1.0, 0.0, 3.0, 1.0, 2.0, 5.0)
    assert parsed.quant_m == Q and parsed.point_count == 2
