from __future__ import annotations

import queue
import resource
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..codec.image import encode_image
from ..codec.points import PointCodecParams, encode_points
from ..core import EngineConfig, Modality, SensorFrame, summarize
from ..errors import AvsError, DuplicateItemError, StorageError, ValidationError
from ..hotstore import HotStore
from ..reduce import DedupFilter, voxel_downsample

DEFAULT_PERIOD_MS = {Modality.IMAGE: 100.0, Modality.LIDAR: 100.0, Modality.GPS: 20.0}
GPS_ROW_BYTES = 32
_STOP = object()


@dataclass(frozen=True)
class PipelineBudget:
    modality: Modality
    period_ms: float

    def __post_init__(self):
        if not self.period_ms > 0:
            raise ValidationError(f"period must be > 0, got {self.period_ms}")

    @property
    def deadline_ms(self) -> float:
        return self.period_ms

    @classmethod
    def from_rate(cls, modality, rate_hz: float) -> "PipelineBudget":
        if not rate_hz > 0:
            raise ValidationError(f"rate must be > 0, got {rate_hz}")
        return cls(Modality.parse(modality), 1000.0 / rate_hz)


@dataclass
class ModalityReport:
    modality: str
    period_ms: float
    latencies_ms: list = field(default_factory=list)
    queue_wait_ms: list = field(default_factory=list)
    frames_in: int = 0
    frames_kept: int = 0
    frames_dropped_by_dedup: int = 0
    queue_overflows: int = 0
    frames_failed: int = 0    # admitted, then lost to a codec or storage error
    frames_rejected: int = 0  # never admitted: ts regression or halted pipeline
    bytes_in: int = 0
    bytes_reduced: int = 0
    bytes_written: int = 0
    points_in: int = 0
    points_out: int = 0
    peak_queue_depth: int = 0
    errors: list = field(default_factory=list)
    halted: bool = False

    @property
    def percentiles(self) -> dict[str, float]:
        return summarize(self.latencies_ms)

    @property
    def deadline_misses(self) -> int:
        return sum(1 for v in self.latencies_ms if v >= self.period_ms)

    @property
    def reduction_ratio(self) -> float:
        if self.modality == Modality.LIDAR.value:
            return 1.0 - self.points_out / self.points_in if self.points_in else 0.0
        processed = self.frames_kept + self.frames_dropped_by_dedup
        return self.frames_dropped_by_dedup / processed if processed else 0.0

    @property
    def compression_ratio(self) -> float:
        return self.bytes_reduced / self.bytes_written if self.bytes_written else 0.0

    def accounted(self) -> bool:
        return self.frames_in == (self.frames_kept + self.frames_dropped_by_dedup
                                  + self.queue_overflows + self.frames_failed)


@dataclass
class IngestReport:
    modalities: dict[str, ModalityReport]
    wall_s: float = 0.0
    stored_bytes: int = 0
    peak_rss_mb: float = 0.0

    def __getitem__(self, modality) -> ModalityReport:
        return self.modalities[Modality.parse(modality).value]

    @property
    def raw_bytes(self) -> int:
        return sum(r.bytes_in for r in self.modalities.values())

    @property
    def footprint_ratio(self) -> float:
        return self.stored_bytes / self.raw_bytes if self.raw_bytes else 0.0

    def lines(self, prefix: str = "ingest") -> list[str]:
        out = [
            f"{prefix}.wall_s={self.wall_s:.3f}",
            f"{prefix}.raw_bytes={self.raw_bytes}",
            f"{prefix}.stored_bytes={self.stored_bytes}",
            f"{prefix}.footprint_ratio={self.footprint_ratio:.4f}",
            f"{prefix}.peak_rss_mb={self.peak_rss_mb:.1f}",
        ]
        for name, r in self.modalities.items():
            key = f"{prefix}.{name}"
            for pname, v in r.percentiles.items():
                out.append(f"{key}.{pname}_ms={v:.3f}")
            wait = summarize(r.queue_wait_ms)
            out.append(f"{key}.queue_wait_p99_ms={wait['p99']:.3f}")
            for attr in ("frames_in", "frames_kept", "frames_dropped_by_dedup", "queue_overflows",
                         "frames_failed", "frames_rejected", "bytes_in", "bytes_written",
                         "peak_queue_depth", "deadline_misses"):
                out.append(f"{key}.{attr}={getattr(r, attr)}")
            out.append(f"{key}.period_ms={r.period_ms:g}")
            out.append(f"{key}.reduction_ratio={r.reduction_ratio:.4f}")
            out.append(f"{key}.compression_ratio={r.compression_ratio:.4f}")
            out.append(f"{key}.halted={int(r.halted)}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


class _Worker(threading.Thread):
    """Sequential dequeue -> reduce -> encode -> persist for one modality."""

    def __init__(self, modality: Modality, store: HotStore, config: EngineConfig,
                 report: ModalityReport, fault=None):
        super().__init__(name=f"ingest-{modality.value}", daemon=True)
        self.modality = modality
        self.store = store
        self.config = config
        self.report = report
        self.fault = fault
        self.queue: queue.Queue = queue.Queue(maxsize=config.queue_capacity_per_modality)
        self.halted = threading.Event()
        self.dedup = DedupFilter(config.dedup_hamming_threshold)
        self.codec_params = PointCodecParams(config.point_quant_m, True, config.point_compression)
        self.pending: list[float] = []  # gps: dequeue times of rows not yet durable

    def run(self) -> None:
        try:
            if self.modality is Modality.GPS:
                self._run_gps()
            else:
                self._run_files()
        except BaseException as exc:  # keep the other pipelines alive
            self.report.frames_failed += len(self.pending)
            self.pending.clear()
            self._halt(exc)
            self._drain()

    def _halt(self, exc: BaseException) -> None:
        self.report.errors.append(f"{type(exc).__name__}: {exc}")
        self.report.halted = True
        self.halted.set()

    def _drain(self) -> None:
        while True:
            item = self.queue.get()
            if item is _STOP:
                return
            self.report.frames_failed += 1

    def _encode(self, frame: SensorFrame) -> bytes | None:
        r = self.report
        if self.modality is Modality.IMAGE:
            if not self.dedup.offer(frame.payload).keep:
                r.frames_dropped_by_dedup += 1
                return None
            r.bytes_reduced += frame.payload.nbytes
            return encode_image(frame.payload, self.config.image_quality, ts=frame.ts)
        reduced = voxel_downsample(frame.payload, self.config.voxel_leaf_m)
        r.points_in += len(frame.payload)
        r.points_out += len(reduced)
        r.bytes_reduced += reduced.raw_nbytes
        return encode_points(reduced, self.codec_params).to_bytes()

    def _run_files(self) -> None:
        r = self.report
        while True:
            item = self.queue.get()
            if item is _STOP:
                return
            frame, enqueued = item
            start = time.perf_counter()
            r.queue_wait_ms.append((start - enqueued) * 1e3)
            try:
                data = self._encode(frame)
                if data is None:
                    continue
                self.store.put(data, self.modality, frame.ts, fault=self.fault)
            except DuplicateItemError as exc:
                r.frames_failed += 1
                r.errors.append(str(exc))
                continue
            except StorageError as exc:
                r.frames_failed += 1
                self._halt(exc)
                self._drain()
                return
            except AvsError as exc:
                r.frames_failed += 1
                r.errors.append(f"{type(exc).__name__}: {exc}")
                continue
            except BaseException:
                r.frames_failed += 1
                raise
            r.latencies_ms.append((time.perf_counter() - start) * 1e3)
            r.frames_kept += 1
            r.bytes_written += len(data)

    def _run_gps(self) -> None:
        r = self.report
        gps = self.store.gps
        pending = self.pending

        def settle():
            now = time.perf_counter()
            r.latencies_ms.extend((now - t) * 1e3 for t in pending)
            r.frames_kept += len(pending)
            # rows are stored as-is: logical bytes in == bytes out
            r.bytes_reduced += GPS_ROW_BYTES * len(pending)
            r.bytes_written += GPS_ROW_BYTES * len(pending)
            pending.clear()

        while True:
            deadline = gps.next_deadline()
            timeout = None if deadline is None else max(deadline - gps.clock(), 0.0)
            try:
                item = self.queue.get(timeout=timeout)
            except queue.Empty:
                if gps.maybe_flush():
                    settle()
                continue
            if item is _STOP:
                gps.flush()
                settle()
                return
            frame, enqueued = item
            start = time.perf_counter()
            r.queue_wait_ms.append((start - enqueued) * 1e3)
            try:
                if self.fault is not None:
                    self.fault("gps.append")
                committed = gps.append(frame.payload)
            except DuplicateItemError as exc:
                r.frames_failed += 1
                r.errors.append(str(exc))
                continue
            except (StorageError, OSError) as exc:
                r.frames_failed += 1 + len(pending)
                pending.clear()
                self._halt(exc)
                self._drain()
                return
            except BaseException:
                r.frames_failed += 1
                raise
            pending.append(start)
            if committed:
                settle()


def run_pipeline(source: Iterable[SensorFrame], config: EngineConfig | None = None,
                 store: HotStore | None = None, speed: float | None = None,
                 backpressure: str = "reject",
                 periods_ms: dict | None = None,
                 faults: dict[Modality, Callable[[str], None]] | None = None) -> IngestReport:
    """Feed ``source`` through one pipeline per modality into the hot store.

    ``speed`` paces delivery against the frame timestamps (1.0 is real time,
    None means as fast as the source yields). ``backpressure`` is "reject"
    (a full queue refuses the new frame) or "block" for offline replays.
    """
    config = config or EngineConfig()
    if backpressure not in ("reject", "block"):
        raise ValidationError(f"backpressure must be 'reject' or 'block', got {backpressure!r}")
    if speed is not None and not speed > 0:
        raise ValidationError(f"speed must be > 0, got {speed}")
    own_store = store is None
    if own_store:
        store = HotStore(config.hot_root, config)
    periods = dict(DEFAULT_PERIOD_MS)
    periods.update({Modality.parse(k): float(v) for k, v in (periods_ms or {}).items()})
    faults = {Modality.parse(k): v for k, v in (faults or {}).items()}

    reports = {m.value: ModalityReport(m.value, periods[m]) for m in Modality}
    workers = {m: _Worker(m, store, config, reports[m.value], faults.get(m)) for m in Modality}
    for w in workers.values():
        w.start()

    last_ts: dict[Modality, int] = {}
    began = time.perf_counter()
    first_ts = None
    try:
        for frame in source:
            m = frame.modality
            w, r = workers[m], reports[m.value]
            if speed is not None:
                first_ts = frame.ts if first_ts is None else first_ts
                delay = began + (frame.ts - first_ts) / 1000.0 / speed - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            if m in last_ts and frame.ts < last_ts[m]:
                r.frames_rejected += 1
                r.errors.append(f"timestamp regression {frame.ts} < {last_ts[m]}")
                continue
            if w.halted.is_set():
                r.frames_rejected += 1
                continue
            last_ts[m] = frame.ts
            r.frames_in += 1
            r.bytes_in += frame.raw_nbytes
            entry = (frame, time.perf_counter())
            if backpressure == "block":
                w.queue.put(entry)
            else:
                try:
                    w.queue.put_nowait(entry)
                except queue.Full:
                    r.queue_overflows += 1
                    continue
            r.peak_queue_depth = max(r.peak_queue_depth, w.queue.qsize())
    finally:
        for w in workers.values():
            w.queue.put(_STOP)
        for w in workers.values():
            w.join()
    wall = time.perf_counter() - began

    report = IngestReport(reports, wall_s=wall, peak_rss_mb=peak_rss_mb())
    report.stored_bytes = store.usage().total_bytes
    if own_store:
        store.close()
    return report
