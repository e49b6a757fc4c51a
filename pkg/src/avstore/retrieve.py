"""Time-range reads across both tiers, plus the TTFB / per-item benchmark."""

from __future__ import annotations

import bisect
import heapq
import random
import struct
import time
from dataclasses import dataclass, field
from typing import Iterator

from .archive import Archiver, ArchiveEntry
from .codec.image import decode_image
from .codec.points import decode_points
from .codec.tarpack import MEMBERS, read_member
from .core import Modality, day_bounds, render_ts, summarize
from .errors import BenchPreconditionError, IntegrityError, TarFormatError, ValidationError
from .hotstore import HotItem, HotStore, read_gps_store

GPS_ROW = struct.Struct("<qddd")
MINUTE_MS = 60_000
MODES = ("decoded", "raw")


@dataclass(frozen=True)
class RetrievedItem:
    modality: Modality
    ts: int
    data: object  # bytes in raw mode; ImageBuffer / PointCloud / GpsFix when decoded
    tier: str

    @property
    def raw(self) -> bool:
        return isinstance(self.data, bytes)


class Retriever:
    def __init__(self, hot: HotStore, archiver: Archiver):
        self.hot = hot
        self.archiver = archiver

    # -- sources ----------------------------------------------------------

    def _cold_members(self, m: Modality, entries: list[ArchiveEntry], t0: int, t1: int):
        for entry in entries:
            path = self.archiver.cold_path(entry)
            try:
                archive, _ = MEMBERS.get(path)
            except FileNotFoundError:
                raise IntegrityError("catalogued archive missing", path) from None
            for member in archive.members:
                ts = member.ts
                if ts > t1:
                    break
                if ts >= t0:
                    yield ts, "cold", (path, member)

    def _cold_lookup(self, m: Modality, ts: int):
        name = f"{render_ts(ts)}.{m.ext}"
        for entry in self.archiver.catalog_lookup(m, ts, ts):
            path = self.archiver.cold_path(entry)
            try:
                _, by_name = MEMBERS.get(path)
            except FileNotFoundError:
                continue
            if name in by_name:
                return path, by_name[name]
        return None

    def _read_file_item(self, m: Modality, tier: str, ref) -> tuple[str, bytes]:
        if tier == "cold":
            path, member = ref
            return "cold", read_member(path, member)
        item: HotItem = ref
        try:
            return "hot", self.hot.read(item)
        except IntegrityError as exc:
            # the archiver may have moved it between our index read and now
            found = self._cold_lookup(m, item.ts)
            if found is None:
                raise exc
            return "cold", read_member(*found)

    def _gps_sources(self, t0: int, t1: int):
        cold = {e.day: e for e in self.archiver.catalog_lookup(Modality.GPS, t0, t1)}
        hot_days = []
        for day in self.hot.gps_days():
            lo, hi = day_bounds(day)
            if lo <= t1 and hi >= t0 and day not in cold:
                hot_days.append(day)
        days = sorted(set(cold) | set(hot_days))
        for day in days:
            if day in cold:
                rows, tier = read_gps_store(self.archiver.cold_path(cold[day]), t0, t1), "cold"
            else:
                path = self.hot.gps_day_path(day)
                try:
                    rows, tier = read_gps_store(path, t0, t1), "hot"
                except IntegrityError:
                    entry = self.archiver.catalog.get(Modality.GPS, day)
                    if entry is None:
                        raise
                    rows, tier = read_gps_store(self.archiver.cold_path(entry), t0, t1), "cold"
            for fix in rows:
                yield fix, tier

    # -- public -----------------------------------------------------------

    def retrieve_range(self, modality, t0: int, t1: int, mode: str = "decoded") -> Iterator[RetrievedItem]:
        """Stream items of one modality in [t0, t1], ascending by ts."""
        m = Modality.parse(modality)
        if t0 > t1:
            raise ValidationError(f"empty range: t0={t0} > t1={t1}")
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        return self._gps_stream(t0, t1, mode) if m is Modality.GPS else self._file_stream(m, t0, t1, mode)

    def _gps_stream(self, t0, t1, mode):
        last = None
        for fix, tier in self._gps_sources(t0, t1):
            if fix.ts == last:
                continue
            last = fix.ts
            data = GPS_ROW.pack(fix.ts, fix.lat, fix.lon, fix.alt) if mode == "raw" else fix
            yield RetrievedItem(Modality.GPS, fix.ts, data, tier)

    def _file_stream(self, m, t0, t1, mode):
        # hot index first, then catalog: an item archived in between shows up
        # in both and is de-duplicated below, never in neither
        hot = [(i.ts, "hot", i) for i in self.hot.index_range(m, t0, t1)]
        cold = self._cold_members(m, self.archiver.catalog_lookup(m, t0, t1), t0, t1)
        last = None
        for ts, tier, ref in heapq.merge(hot, cold, key=lambda x: x[0]):
            if ts == last:
                continue
            last = ts
            tier, payload = self._read_file_item(m, tier, ref)
            if mode == "decoded":
                payload = decode_image(payload, ts) if m is Modality.IMAGE else decode_points(payload)
            yield RetrievedItem(m, ts, payload, tier)

    def timestamps(self, modality) -> list[int]:
        """Every stored ts of a modality, both tiers, ascending."""
        m = Modality.parse(modality)
        if m is Modality.GPS:
            return [fix.ts for fix, _ in self._gps_sources(0, 10**13 - 1)]
        out = {i.ts for i in self.hot.index_range(m, 0, 10**13 - 1)}
        for entry in self.archiver.catalog.all(m):
            try:
                archive, _ = MEMBERS.get(self.archiver.cold_path(entry))
            except (FileNotFoundError, TarFormatError) as exc:
                raise IntegrityError(f"unreadable archive ({exc})", self.archiver.cold_path(entry)) from None
            out.update(mem.ts for mem in archive.members)
        return sorted(out)


# --------------------------------------------------------------------------
# benchmark


def candidate_windows(timestamps: list[int], window_ms: int, min_items: int = 2) -> list[int]:
    """Minute-aligned window starts holding at least ``min_items`` items."""
    if not timestamps:
        return []
    starts = []
    first = timestamps[0] // MINUTE_MS * MINUTE_MS
    for start in range(first, timestamps[-1] + 1, MINUTE_MS):
        lo = bisect.bisect_left(timestamps, start)
        hi = bisect.bisect_left(timestamps, start + window_ms)
        if hi - lo >= min_items:
            starts.append(start)
    return starts


def pick_windows(candidates: list[int], n: int, seed: int, label: str) -> list[int]:
    rng = random.Random(f"{seed}:{label}")
    if len(candidates) >= n:
        return sorted(rng.sample(candidates, n))
    return sorted(rng.choices(candidates, k=n))


@dataclass
class ModalityRetrieval:
    ttfb_ms: list[float] = field(default_factory=list)
    per_item_ms: list[float] = field(default_factory=list)
    items_total: int = 0
    windows: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class RetrievalReport:
    mode: str
    modalities: dict[str, ModalityRetrieval]

    def lines(self, prefix: str = "retrieve") -> list[str]:
        out = [f"{prefix}.mode={self.mode}"]
        for name, r in self.modalities.items():
            key = f"{prefix}.{name}"
            out.append(f"{key}.windows={len(r.windows)}")
            out.append(f"{key}.items_total={r.items_total}")
            for metric in ("ttfb_ms", "per_item_ms"):
                samples = getattr(r, metric)
                if not samples:
                    continue
                for pname, v in summarize(samples).items():
                    out.append(f"{key}.{metric}.{pname}={v:.4f}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def retrieval_bench(retriever: Retriever, n_windows: int = 6, window_s: float = 75, seed: int = 0,
                    mode: str = "decoded", modalities=tuple(Modality)) -> RetrievalReport:
    window_ms = int(round(window_s * 1000))
    if n_windows <= 0 or window_ms <= 0:
        raise ValidationError("n_windows and window_s must be positive")
    report = RetrievalReport(mode, {})
    for m in map(Modality.parse, modalities):
        candidates = candidate_windows(retriever.timestamps(m), window_ms)
        if not candidates:
            continue
        stats = ModalityRetrieval()
        for start in pick_windows(candidates, n_windows, seed, m.value):
            t0, t1 = start, start + window_ms - 1
            stats.windows.append((t0, t1))
            began = time.perf_counter()
            prev = None
            for item in retriever.retrieve_range(m, t0, t1, mode):
                now = time.perf_counter()
                if prev is None:
                    stats.ttfb_ms.append((now - began) * 1e3)
                else:
                    stats.per_item_ms.append((now - prev) * 1e3)
                prev = now
                stats.items_total += 1
        report.modalities[m.value] = stats
    if not report.modalities:
        raise BenchPreconditionError(
            f"no minute-aligned {window_s:g} s window holds 2 or more items in any modality"
        )
    return report
