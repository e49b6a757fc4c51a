"""Desk-scale benchmark harness: index range queries, archive runs, file
fragmentation and the combined suite report."""

from __future__ import annotations

import csv
import datetime as dt
import fcntl
import math
import os
import random
import shutil
import statistics
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..archive import Archiver
from ..core import EngineConfig, GpsFix, Modality, day_bounds, day_of, summarize
from ..errors import ValidationError
from ..hotstore import HotItem, HotStore, ItemIndex, rel_path_for
from ..retrieve import Retriever, RetrievalReport, retrieval_bench
from .pipeline import IngestReport, run_pipeline
from .sources import SynthSpec, synth_source

# --------------------------------------------------------------------------
# statistics


def mean_ci95(samples) -> tuple[float, float, float]:
    """(mean, low, high) with half-width 1.96 * s / sqrt(n), s the sample std."""
    xs = [float(v) for v in samples]
    if not xs:
        raise ValidationError("confidence interval of an empty sample")
    mean = statistics.fmean(xs)
    if len(xs) < 2:
        return mean, mean, mean
    half = 1.96 * statistics.stdev(xs) / math.sqrt(len(xs))
    return mean, mean - half, mean + half


# --------------------------------------------------------------------------
# fragmentation


def frag_index(extents, total_size: int) -> float:
    """1 - largest extent / file size; 0 for a fully contiguous file."""
    if total_size <= 0:
        raise ValidationError("frag_index of an empty file")
    lengths = [int(length) for _, length in extents]
    if sum(lengths) != total_size:
        raise ValidationError(f"extents cover {sum(lengths)} bytes, file has {total_size}")
    return 1.0 - max(lengths) / total_size


_FS_IOC_FIEMAP = 0xC020660B
_FIEMAP_FLAG_SYNC = 0x1
_FIEMAP_HEADER = struct.Struct("=QQLLLL")
_FIEMAP_EXTENT = struct.Struct("=QQQQQLLLL")


def _fiemap(fd: int, count: int) -> tuple[int, list[tuple[int, int, int]]]:
    buf = bytearray(_FIEMAP_HEADER.size + count * _FIEMAP_EXTENT.size)
    _FIEMAP_HEADER.pack_into(buf, 0, 0, 2**64 - 1, _FIEMAP_FLAG_SYNC, 0, count, 0)
    fcntl.ioctl(fd, _FS_IOC_FIEMAP, buf, True)
    mapped = _FIEMAP_HEADER.unpack_from(buf, 0)[3]
    out = []
    for i in range(min(mapped, count)):
        logical, physical, length, *_ = _FIEMAP_EXTENT.unpack_from(
            buf, _FIEMAP_HEADER.size + i * _FIEMAP_EXTENT.size
        )
        out.append((logical, physical, length))
    return mapped, out


def file_extents(path) -> list[tuple[int, int]]:
    """Physically contiguous (offset, length) runs of a file, clipped to its size.

    Uses the Linux FIEMAP ioctl; raises OSError where the filesystem lacks it.
    """
    with open(path, "rb") as f:
        size = os.fstat(f.fileno()).st_size
        if size == 0:
            return []
        mapped, _ = _fiemap(f.fileno(), 0)
        _, raw = _fiemap(f.fileno(), max(mapped, 1))
    runs: list[list[int]] = []
    for logical, physical, length in raw:
        if runs and runs[-1][2] + runs[-1][1] == physical and runs[-1][0] + runs[-1][1] == logical:
            runs[-1][1] += length
        else:
            runs.append([logical, length, physical])
    out = []
    for logical, length, _ in runs:
        length = min(length, size - logical)
        if length > 0:
            out.append((logical, length))
    if sum(length for _, length in out) != size:
        raise OSError(f"extent map of {path} does not cover the file")
    return out


def file_frag_index(path) -> float | None:
    """frag_index from the platform extent map; None when it is unavailable."""
    try:
        extents = file_extents(path)
    except OSError:
        return None
    return frag_index(extents, os.path.getsize(path)) if extents else None


# --------------------------------------------------------------------------
# index range queries


@dataclass
class RangeQueryReport:
    insert_ms: list[float]
    query_ms: list[float]
    queries: list[tuple[int, int, int]]  # (t0, t1, rows returned)
    timestamps: list[int]
    index_bytes: int

    @property
    def rows_scanned(self) -> int:
        return sum(q[2] for q in self.queries)

    def lines(self, prefix: str = "range_query") -> list[str]:
        q = summarize(self.query_ms)
        return [
            f"{prefix}.items={len(self.timestamps)}",
            f"{prefix}.queries={len(self.queries)}",
            f"{prefix}.mean_insert_ms={statistics.fmean(self.insert_ms):.6f}",
            f"{prefix}.mean_query_ms={statistics.fmean(self.query_ms):.6f}",
            f"{prefix}.p99_query_ms={q['p99']:.6f}",
            f"{prefix}.rows_scanned={self.rows_scanned}",
            f"{prefix}.mean_rows_per_query={self.rows_scanned / len(self.queries):.3f}",
            f"{prefix}.index_bytes={self.index_bytes}",
        ]


def range_query_bench(root, n_items: int = 1000, n_queries: int = 1000, half_window_ms: int = 500,
                      spacing_ms: int = 100, seed: int = 0,
                      start_ts: int = 1_717_200_000_000) -> RangeQueryReport:
    if n_items < 1 or n_queries < 1:
        raise ValidationError("need at least one item and one query")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "avs_bench.idx"
    for leftover in root.glob("avs_bench.idx*"):
        leftover.unlink()
    idx = ItemIndex(path, Modality.IMAGE)
    try:
        stamps = [start_ts + i * spacing_ms for i in range(n_items)]
        items = [HotItem(Modality.IMAGE, ts, rel_path_for(Modality.IMAGE, ts), 12_000) for ts in stamps]
        insert_ms = idx.insert_many(items)
        rng = random.Random(seed)
        query_ms, queries = [], []
        for _ in range(n_queries):
            center = rng.randint(stamps[0], stamps[-1])
            t0, t1 = center - half_window_ms, center + half_window_ms
            began = time.perf_counter()
            rows = idx.range(t0, t1)
            query_ms.append((time.perf_counter() - began) * 1e3)
            queries.append((t0, t1, len(rows)))
        size = idx.size_on_disk()
    finally:
        idx.close()
    return RangeQueryReport(insert_ms, query_ms, queries, stamps, size)


# --------------------------------------------------------------------------
# archive runs


def current_rss_mb() -> float:
    try:
        with open("/proc/self/statm") as f:
            pages = int(f.read().split()[1])
        return pages * os.sysconf("SC_PAGE_SIZE") / 2**20
    except (OSError, ValueError):
        import resource
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def populate_days(hot: HotStore, days: list[dt.date], items_per_day: int, seed: int,
                  image_bytes: int = 12_000, lidar_bytes: int = 80_000) -> int:
    """Fill whole days with incompressible stand-in payloads; returns bytes written."""
    rng = np.random.default_rng(seed)
    written = 0
    for day in days:
        lo = day_bounds(day)[0] + 8 * 3_600_000
        for i in range(items_per_day):
            ts = lo + i * 100
            for m, size in ((Modality.IMAGE, image_bytes), (Modality.LIDAR, lidar_bytes)):
                payload = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
                hot.put(payload, m, ts)
                written += size
            for k in range(5):
                hot.gps_append(GpsFix(ts + 20 * k, 48.0 + 1e-6 * i, 11.0, 500.0))
        hot.gps.flush()
    return written


@dataclass
class ArchiveRun:
    latency_s: float
    cpu_pct: float
    rss_mb: float
    archived_bytes: int
    entries: int
    frag: list[float] = field(default_factory=list)


@dataclass
class ArchiveBenchReport:
    runs: list[ArchiveRun]

    def lines(self, prefix: str = "archive") -> list[str]:
        out = [f"{prefix}.runs={len(self.runs)}"]
        for name in ("latency_s", "cpu_pct", "rss_mb"):
            xs = [getattr(r, name) for r in self.runs]
            mean, lo, hi = mean_ci95(xs)
            out += [
                f"{prefix}.{name}.max={max(xs):.4f}",
                f"{prefix}.{name}.mean={mean:.4f}",
                f"{prefix}.{name}.ci95_low={lo:.4f}",
                f"{prefix}.{name}.ci95_high={hi:.4f}",
            ]
        out.append(f"{prefix}.archived_mb_per_run={self.runs[0].archived_bytes / 2**20:.3f}")
        frags = [f for r in self.runs for f in r.frag]
        if frags:
            out.append(f"{prefix}.frag_index.mean={statistics.fmean(frags):.4f}")
        return out


def archive_bench(root, runs: int = 10, days: int = 2, items_per_day: int = 100,
                  seed: int = 0) -> ArchiveBenchReport:
    """Archive freshly populated stores ``runs`` times, measuring each archive pass."""
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    root = Path(root)
    first_day = dt.date(2024, 5, 1)
    day_list = [first_day + dt.timedelta(days=d) for d in range(days)]
    out = []
    for run in range(runs):
        base = Path(tempfile.mkdtemp(prefix=f"run{run}-", dir=root))
        cfg = EngineConfig(hot_root=base / "hot", cold_root=base / "cold")
        hot = HotStore(cfg.hot_root, cfg)
        populate_days(hot, day_list, items_per_day, seed + run)
        archiver = Archiver(hot, cfg.cold_root)
        wall0, cpu0 = time.perf_counter(), time.process_time()
        entries = archiver.archive_before(day_list[-1] + dt.timedelta(days=1))
        wall, cpu = time.perf_counter() - wall0, time.process_time() - cpu0
        rss = current_rss_mb()
        paths = [archiver.cold_path(e) for e in entries]
        frags = [f for f in map(file_frag_index, paths) if f is not None]
        out.append(ArchiveRun(wall, 100.0 * cpu / wall if wall > 0 else 0.0, rss,
                              sum(p.stat().st_size for p in paths), len(entries), frags))
        archiver.close()
        hot.close()
        shutil.rmtree(base)
    return ArchiveBenchReport(out)


# --------------------------------------------------------------------------
# the suite


@dataclass
class SuiteReport:
    ingest: IngestReport
    range_query: RangeQueryReport
    archive: ArchiveBenchReport
    retrieval: RetrievalReport
    seed: int

    def lines(self) -> list[str]:
        return ([f"suite.seed={self.seed}"] + self.ingest.lines() + self.range_query.lines()
                + self.archive.lines() + self.retrieval.lines())

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write_csv(self, path) -> int:
        """Raw latency samples as (section, modality, metric, index, value_ms)."""
        rows = []
        for name, r in self.ingest.modalities.items():
            rows += [("ingest", name, "latency_ms", i, v) for i, v in enumerate(r.latencies_ms)]
            rows += [("ingest", name, "queue_wait_ms", i, v) for i, v in enumerate(r.queue_wait_ms)]
        rows += [("range_query", "", "insert_ms", i, v) for i, v in enumerate(self.range_query.insert_ms)]
        rows += [("range_query", "", "query_ms", i, v) for i, v in enumerate(self.range_query.query_ms)]
        for name, r in self.retrieval.modalities.items():
            rows += [("retrieve", name, "ttfb_ms", i, v) for i, v in enumerate(r.ttfb_ms)]
            rows += [("retrieve", name, "per_item_ms", i, v) for i, v in enumerate(r.per_item_ms)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["section", "modality", "metric", "index", "value_ms"])
            w.writerows(rows)
        return len(rows)


def bench_suite(config: EngineConfig, seed: int = 0, duration_s: float = 120.0,
                speed: float | None = None, n_windows: int = 6, window_s: float = 75,
                archive_runs: int = 10, query_items: int = 1000, n_queries: int = 1000,
                spec: SynthSpec | None = None) -> SuiteReport:
    """Run ingest, range-query, archive and retrieval benchmarks in ``config``'s roots.

    The synthetic trace straddles a UTC midnight so the archive step moves
    its first day to the cold tier and retrieval exercises both tiers.
    """
    hot_root, cold_root = Path(config.hot_root), Path(config.cold_root)
    if spec is None:
        midnight = day_bounds(dt.date(2024, 6, 2))[0]
        spec = SynthSpec(duration_s=duration_s, start_ts=midnight - int(duration_s * 500))
    hot = HotStore(hot_root, config)
    try:
        backpressure = "reject" if speed is not None else "block"
        ingest = run_pipeline(synth_source(spec, seed), config, store=hot, speed=speed,
                              backpressure=backpressure)
        archiver = Archiver(hot, cold_root, config)
        try:
            last_ts = spec.frame_ts(Modality.GPS, max(spec.frame_count(Modality.GPS) - 1, 0))
            archiver.archive_before(day_of(last_ts))
            retrieval = retrieval_bench(Retriever(hot, archiver), n_windows, window_s, seed)
        finally:
            archiver.close()
    finally:
        hot.close()
    with tempfile.TemporaryDirectory(prefix="bench-", dir=hot_root.parent) as scratch:
        queries = range_query_bench(Path(scratch) / "index", query_items, n_queries, seed=seed)
        archive = archive_bench(scratch, runs=archive_runs, seed=seed)
    return SuiteReport(ingest, queries, archive, retrieval, seed)
