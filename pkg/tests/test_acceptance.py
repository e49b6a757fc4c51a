"""End-to-end acceptance checks, one group per criterion. The terminal summary
(see conftest) prints one PASS/FAIL line per criterion."""

import datetime as dt
import hashlib
import math
import random
import time

import numpy as np
import pytest

from avstore.archive import Archiver
from avstore.codec.points import decode_points, encode_points
from avstore.core import FILE_MODALITIES, EngineConfig, ImageBuffer, Modality, PointCloud, day_bounds, render_ts
from avstore.errors import CodecError
from avstore.hotstore import HotStore, read_gps_store
from avstore.ingest.bench import frag_index, mean_ci95, range_query_bench
from avstore.ingest.pipeline import run_pipeline
from avstore.ingest.sources import SynthSpec, synth_source
from avstore.reduce import ALL_ONES, DedupFilter, dct2_32, hamming64, phash64, voxel_downsample, voxel_keys
from avstore.retrieve import Retriever
from harness import ALL, check_consistent, populate, retrieve_all
from oracles import dct2_doublesum, tar_contents, voxel_oracle

criterion = pytest.mark.criterion


# -- 1 ------------------------------------------------------------------------


def random_cloud(rng: np.random.Generator) -> PointCloud:
    n = int(rng.integers(1, 10_001))
    kind = rng.integers(0, 3)
    if kind == 0:
        xyz = rng.uniform(-rng.uniform(1, 80), rng.uniform(1, 80), size=(n, 3))
    elif kind == 1:
        centers = rng.uniform(-30, 30, size=(int(rng.integers(1, 20)), 3))
        xyz = centers[rng.integers(0, len(centers), n)] + rng.normal(0, 0.3, size=(n, 3))
    else:
        # many points exactly on cell faces
        xyz = rng.integers(-50, 50, size=(n, 3)) * 0.2 + rng.choice([0.0, 0.05, 0.1999], size=(n, 3))
    return PointCloud(np.hstack([xyz, rng.random((n, 1))]))


@criterion(1, "reduction matches grouping oracle, idempotent, < 10 s")
def test_c1_voxel_against_oracle():
    rng = np.random.default_rng(2024)
    clouds = [random_cloud(rng) for _ in range(100)]
    elapsed = 0.0
    for cloud in clouds:
        t = time.perf_counter()
        out = voxel_downsample(cloud, 0.2)
        again = voxel_downsample(out, 0.2)
        elapsed += time.perf_counter() - t

        expected = voxel_oracle(cloud.points.tolist(), 0.2)
        keys = [tuple(k) for k in voxel_keys(out.xyz, 0.2).tolist()]
        assert keys == sorted(expected)
        ref = np.array([expected[k] for k in keys])
        assert np.abs(out.points - ref).max() <= 1e-9
        assert again == out
    print(f"voxel_downsample total for 100 clouds x2: {elapsed:.3f} s")
    assert elapsed < 10.0


# -- 2 ------------------------------------------------------------------------


def naive_dct_tensor(n: int = 32) -> np.ndarray:
    """B[u, v, x, y] of the direct double sum, so F = sum_xy f * B elementwise."""
    k = np.arange(n)
    cos = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / (2 * n))  # [u, x]
    c = np.where(k == 0, 1 / math.sqrt(2), 1.0)
    return (2.0 / n) * (c[:, None, None, None] * c[None, :, None, None]
                        * cos[:, None, :, None] * cos[None, :, None, :])


@criterion(2, "pHash conformance")
def test_c2_dct_against_double_sum():
    rng = np.random.default_rng(7)
    basis = naive_dct_tensor()
    worst = 0.0
    for i in range(50):
        f = rng.uniform(0, 255, size=(32, 32))
        ref = (basis * f[None, None, :, :]).sum(axis=(2, 3))
        if i < 2:  # fully scalar reference on a couple of inputs
            scalar = np.array(dct2_doublesum(f.tolist(), "orthonormal"))
            assert np.abs(scalar - ref).max() <= 1e-9 * np.abs(scalar).max()
        rel = np.abs(dct2_32(f) - ref).max() / np.abs(ref).max()
        worst = max(worst, rel)
    print(f"worst relative DCT error over 50 images: {worst:.3e}")
    assert worst <= 1e-9


@criterion(2, "pHash conformance")
def test_c2_hash_examples():
    rng = np.random.default_rng(8)
    for value in (0, 77, 255):
        assert phash64(ImageBuffer.from_array(np.full((240, 320, 3), value, dtype=np.uint8))) == ALL_ONES
    for _ in range(10):
        arr = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
        a, b = ImageBuffer.from_array(arr), ImageBuffer.from_array(arr.copy())
        assert hamming64(phash64(a), phash64(b)) == 0


# -- 3 ------------------------------------------------------------------------


@criterion(3, "dedup keeps exactly K constructed scenes")
@pytest.mark.parametrize("k", [1, 3, 7])
def test_c3_scene_ground_truth(k):
    spec = SynthSpec(duration_s=k, rates={Modality.IMAGE: 10})
    filt = DedupFilter(2)
    kept = sum(filt.offer(f.payload).keep for f in synth_source(spec, seed=100 + k))
    assert filt.seen == 10 * k
    assert kept == k


# -- 4 ------------------------------------------------------------------------


@criterion(4, "codec round trip and framing")
def test_c4_codec_round_trip():
    rng = np.random.default_rng(44)
    q = 0.001
    worst = 0.0
    for i in range(100):
        cloud = random_cloud(rng)
        data = encode_points(cloud).to_bytes()
        out = decode_points(data)
        assert len(out) == len(cloud)
        assert decode_points(data) == out
        assert encode_points(PointCloud(cloud.points[rng.permutation(len(cloud))])).to_bytes() == data
        # pair each input point with its reconstruction through the quantised key
        src = np.round(cloud.xyz / q).astype(np.int64)
        order_in = np.lexsort(src.T[::-1])
        order_out = np.lexsort(np.round(out.xyz / q).astype(np.int64).T[::-1])
        err = np.abs(cloud.xyz[order_in] - out.xyz[order_out]).max()
        worst = max(worst, err)
        cuts = rng.integers(1, len(data), size=5) if i else range(1, len(data))
        for cut in cuts:
            with pytest.raises(CodecError):
                decode_points(data[:int(cut)])
    print(f"worst per-axis reconstruction error: {worst:.6e} m")
    assert worst <= q / 2


# -- 5 ------------------------------------------------------------------------


def sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@criterion(5, "storage bisimulation after ingest and archive")
def test_c5_bisimulation(tmp_path):
    rnd = random.Random(5)
    seed = rnd.randrange(1 << 30)
    midnight = day_bounds(dt.date(2024, 6, 2))[0]
    spec = SynthSpec(duration_s=300, start_ts=midnight - rnd.randrange(60_000, 240_000),
                     cloud_points=1500, image_size=(96, 64), scene_period_s=rnd.choice([0.5, 1, 2]))
    cfg = EngineConfig(hot_root=tmp_path / "hot", cold_root=tmp_path / "cold")
    hot = HotStore(cfg.hot_root, cfg)
    try:
        report = run_pipeline(synth_source(spec, seed), cfg, store=hot, backpressure="block")
        assert all(r.accounted() and not r.halted for r in report.modalities.values())
        assert check_consistent(hot, Archiver(hot, cfg.cold_root, cfg)) == []
        before = {m: {i.ts: sha(hot.read(i)) for i in hot.index(m).all()} for m in FILE_MODALITIES}
        gps_before = {d: read_gps_store(hot.gps_day_path(d)) for d in hot.gps_days()}

        archiver = Archiver(hot, cfg.cold_root, cfg)
        entries = archiver.archive_before(dt.date(2024, 6, 2))
        assert {e.modality for e in entries} == set(Modality)
        assert check_consistent(hot, archiver) == []
        for m in FILE_MODALITIES:
            rows = {i.ts: i.size_bytes for i in hot.index(m).all()}
            assert rows == hot.scan_files(m)
            archived = {}
            for e in archiver.catalog.all(m):
                members = tar_contents(archiver.cold_path(e))
                assert len(members) == e.item_count
                archived.update({int(name[:13]): sha(data) for name, data, _ in members})
            assert set(archived) | set(rows) == set(before[m])
            assert not set(archived) & set(rows)
            assert all(before[m][ts] == digest for ts, digest in archived.items())
        for e in archiver.catalog.all(Modality.GPS):
            assert read_gps_store(archiver.cold_path(e)) == gps_before[e.day]
            assert len(gps_before[e.day]) == e.item_count
        archiver.close()
    finally:
        hot.close()


# -- 6 ------------------------------------------------------------------------


@criterion(6, "crash safety at every protocol step")
def test_c6_crash_matrix(tmp_path):
    from avstore.archive import ARCHIVE_GPS_STEPS, ARCHIVE_STEPS
    from avstore.errors import SimulatedCrash
    from avstore.hotstore import HOT_PUT_STEPS
    from harness import DAYS, CrashAt, reopen

    points = set(HOT_PUT_STEPS) | set(ARCHIVE_STEPS) | set(ARCHIVE_GPS_STEPS)
    assert len(points) >= 12
    cutoff = dt.date(2024, 6, 3)
    covered = set()
    case = 0

    def run_case(point, nth, during):
        nonlocal case
        case += 1
        cfg = EngineConfig(hot_root=tmp_path / f"c{case}" / "hot", cold_root=tmp_path / f"c{case}" / "cold")
        hot = HotStore(cfg.hot_root, cfg)
        ledger = populate(hot, DAYS, per_day=3, seed=case)
        hook = CrashAt(point, nth)
        arch = Archiver(hot, cfg.cold_root, cfg, fault=hook)
        hot.fault = hook
        try:
            if during == "put":
                hot.put(b"late", "image", day_bounds(DAYS[1])[0] + 1)
            else:
                arch.archive_before(cutoff)
        except SimulatedCrash:
            pass
        arch.abandon()
        hot.abandon()
        if not hook.fired:
            return False
        covered.add(point)
        hot, arch = reopen(cfg)
        try:
            assert check_consistent(hot, arch, cold_temps_ok=True) == [], (point, nth)
            r = Retriever(hot, arch)
            for m in ("image", "lidar", "gps"):
                got = [x for x in retrieve_all(r, m) if x[1] != b"late"]
                assert got == ledger.window(m, *ALL), (point, nth, m)
            arch.archive_before(cutoff)
            assert check_consistent(hot, arch) == [], (point, nth)
            for m in Modality:
                assert [e.day for e in arch.catalog.all(m)] == DAYS
            for m in ("image", "lidar", "gps"):
                got = [x for x in retrieve_all(r, m) if x[1] != b"late"]
                assert got == ledger.window(m, *ALL), (point, nth, m)
        finally:
            arch.close()
            hot.close()
        return True

    for point in HOT_PUT_STEPS:
        assert run_case(point, 1, "put")
    for point in sorted(set(ARCHIVE_STEPS) | set(ARCHIVE_GPS_STEPS)):
        nth = 1
        while run_case(point, nth, "archive"):
            nth += 1
        assert nth > 1, point
    print(f"crash cases: {case}, injection points covered: {len(covered)}")
    assert covered == points


# -- 7 ------------------------------------------------------------------------


@criterion(7, "retrieval completeness across tiers")
def test_c7_random_windows(tmp_path):
    cfg = EngineConfig(hot_root=tmp_path / "hot", cold_root=tmp_path / "cold")
    days = [dt.date(2024, 6, 1) + dt.timedelta(days=d) for d in range(3)]
    hot = HotStore(cfg.hot_root, cfg)
    archiver = Archiver(hot, cfg.cold_root, cfg)
    try:
        ledger = populate(hot, days, per_day=120, seed=77)
        retriever = Retriever(hot, archiver)
        lo, hi = day_bounds(days[0])[0] - 3_600_000, day_bounds(days[-1])[1] + 3_600_000
        rng = random.Random(7)
        windows = []
        for _ in range(1000):
            width = int(math.exp(rng.uniform(0, math.log(2 * 86_400_000))))
            t0 = rng.randint(lo, hi)
            windows.append((rng.choice(["image", "lidar", "gps"]), t0, t0 + width))
        before = [retrieve_all(retriever, m, t0, t1) for m, t0, t1 in windows]
        for (m, t0, t1), got in zip(windows, before):
            assert got == ledger.window(m, t0, t1)
        archiver.archive_before(days[-1])
        tiers = {i.tier for i in retriever.retrieve_range("image", *ALL, mode="raw")}
        assert tiers == {"hot", "cold"}
        after = [retrieve_all(retriever, m, t0, t1) for m, t0, t1 in windows]
        assert after == before
        print(f"windows: 1000, items compared: {sum(map(len, after))}")
    finally:
        archiver.close()
        hot.close()


# -- 8 and 9 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def realtime_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("realtime")
    cfg = EngineConfig(hot_root=root / "hot", cold_root=root / "cold")
    report = run_pipeline(synth_source(SynthSpec(duration_s=120), seed=8), cfg, speed=1.0,
                          backpressure="reject")
    print()
    print(report.to_text())
    return report


@criterion(8, "real-time budget on this machine")
@pytest.mark.slow
def test_c8_realtime_budget(realtime_run):
    expected = {"image": 1200, "lidar": 1200, "gps": 6000}
    for name, r in realtime_run.modalities.items():
        p99 = r.percentiles["p99"]
        print(f"{name}: p99={p99:.2f} ms period={r.period_ms:g} ms overflows={r.queue_overflows}")
        assert r.frames_in == expected[name]
        assert r.queue_overflows == 0 and not r.halted and r.accounted()
        assert p99 < r.period_ms


@criterion(9, "stored footprint below half of raw input")
@pytest.mark.slow
def test_c9_footprint(realtime_run):
    ratio = realtime_run.footprint_ratio
    print(f"footprint ratio {ratio:.4f}; lidar keep {1 - realtime_run['lidar'].reduction_ratio:.4f}; "
          f"image compression {realtime_run['image'].compression_ratio:.2f}x")
    assert realtime_run.stored_bytes > 0
    assert ratio < 0.5
    assert realtime_run["lidar"].points_out < realtime_run["lidar"].points_in


# -- 10 -----------------------------------------------------------------------


@criterion(10, "bench-suite fidelity")
def test_c10_range_query_recount(tmp_path):
    rep = range_query_bench(tmp_path, n_items=1000, n_queries=1000, half_window_ms=500, seed=10)
    stamps = rep.timestamps
    recount = [sum(1 for t in stamps if t0 <= t <= t1) for t0, t1, _ in rep.queries]
    assert [rows for _, _, rows in rep.queries] == recount
    fields = dict(line.split("=") for line in rep.lines())
    assert int(fields["range_query.rows_scanned"]) == sum(recount)
    assert float(fields["range_query.mean_query_ms"]) == pytest.approx(sum(rep.query_ms) / 1000, abs=1e-6)
    center = stamps[500]
    assert sum(1 for t in stamps if center - 500 <= t <= center + 500) == 11


@criterion(10, "bench-suite fidelity")
def test_c10_frag_and_ci():
    assert frag_index([(0, 8192)], 8192) == 0
    assert frag_index([(0, 4096), (4096, 4096)], 8192) == 0.5
    xs = [12.1, 11.8, 12.6, 13.0, 11.5, 12.2, 12.9, 12.4, 11.9, 12.3]
    mean = sum(xs) / len(xs)
    sd = math.sqrt(sum((x - mean) ** 2 for x in xs) / (len(xs) - 1))
    half = 1.96 * sd / math.sqrt(len(xs))
    assert mean_ci95(xs) == pytest.approx((mean, mean - half, mean + half), abs=1e-12)
