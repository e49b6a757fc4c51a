"""Hot tier: per-day file layout, the time index, and per-day GPS stores.

Layout under ``hot_root``::

    images/YYYY-MM-DD/<ts>.jpg
    lidar/YYYY-MM-DD/<ts>.apc
    gps/YYYY-MM-DD.db
    db/avs_image.idx, db/avs_lidar.idx

A put writes the file under a temp name, fsyncs it, renames it into place
and only then inserts the index row. The index is the source of truth; a
file without a row is an orphan that recovery re-indexes or quarantines.
"""

from __future__ import annotations

import datetime as dt
import errno
import logging
import os
import shutil
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .core import (
    FILE_MODALITIES,
    EngineConfig,
    GpsFix,
    Modality,
    check_ts,
    day_bounds,
    day_of,
    parse_day,
    render_ts,
)
from .errors import (
    DuplicateItemError,
    IntegrityError,
    StorageError,
    StorageFullError,
    ValidationError,
)

log = logging.getLogger(__name__)

FaultHook = Callable[[str], None]
TMP_SUFFIX = ".tmp"
TRASH_PREFIX = ".trash-"

HOT_PUT_STEPS = (
    "hot_put.write_temp",
    "hot_put.fsync_file",
    "hot_put.rename",
    "hot_put.index_insert",
    "hot_put.index_commit",
)

_INDEX_SCHEMA = """
CREATE TABLE IF NOT EXISTS hot_items (
    modality TEXT NOT NULL,
    ts INTEGER NOT NULL,
    rel_path TEXT NOT NULL,
    size_bytes INTEGER NOT NULL,
    PRIMARY KEY (modality, ts)
) WITHOUT ROWID
"""

_GPS_SCHEMA = """
CREATE TABLE IF NOT EXISTS avs_gps (
    ts INTEGER PRIMARY KEY,
    lat REAL NOT NULL,
    lon REAL NOT NULL,
    alt REAL NOT NULL
)
"""


def _no_fault(point: str) -> None:
    pass


def fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def connect(path: Path, readonly: bool = False, wal: bool = False) -> sqlite3.Connection:
    if readonly:
        conn = sqlite3.connect(
            f"file:{path}?mode=ro", uri=True, timeout=10, isolation_level=None,
            check_same_thread=False,
        )
    else:
        conn = sqlite3.connect(path, timeout=10, isolation_level=None, check_same_thread=False)
        if wal:
            conn.execute("PRAGMA journal_mode=WAL")
        conn.execute("PRAGMA synchronous=FULL")
    return conn


@dataclass(frozen=True)
class HotItem:
    modality: Modality
    ts: int
    rel_path: str
    size_bytes: int

    @property
    def day(self) -> dt.date:
        return day_of(self.ts)


def rel_path_for(modality: Modality, ts: int) -> str:
    return f"{modality.hot_dir}/{day_of(ts).isoformat()}/{render_ts(ts)}.{modality.ext}"


@dataclass
class RecoveryReport:
    temp_removed: list[str] = field(default_factory=list)
    reindexed: list[str] = field(default_factory=list)
    quarantined: list[str] = field(default_factory=list)
    dangling_rows: list[str] = field(default_factory=list)
    trash_completed: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.temp_removed or self.reindexed or self.quarantined
                    or self.dangling_rows or self.trash_completed)


@dataclass
class HotUsage:
    bytes_by_modality: dict[str, int]
    items_by_modality: dict[str, int]
    oldest_day: dt.date | None

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_modality.values())


class ItemIndex:
    """One embedded index file for one modality; single writer, many readers."""

    def __init__(self, path: Path, modality: Modality):
        self.path = path
        self.modality = modality
        self._conn = connect(path, wal=True)
        self._conn.execute(_INDEX_SCHEMA)
        self._lock = threading.RLock()

    def close(self, commit: bool = True) -> None:
        with self._lock:
            if self._conn is None:
                return
            if self._conn.in_transaction:
                (self._conn.commit if commit else self._conn.rollback)()
            self._conn.close()
            self._conn = None

    def _rows(self, sql, args=()) -> list[HotItem]:
        with self._lock:
            cur = self._conn.execute(sql, args)
            return [HotItem(Modality(m), ts, rel, size) for m, ts, rel, size in cur.fetchall()]

    def get(self, ts: int) -> HotItem | None:
        rows = self._rows(
            "SELECT modality, ts, rel_path, size_bytes FROM hot_items WHERE modality=? AND ts=?",
            (self.modality.value, ts),
        )
        return rows[0] if rows else None

    def range(self, t0: int, t1: int) -> list[HotItem]:
        return self._rows(
            "SELECT modality, ts, rel_path, size_bytes FROM hot_items "
            "WHERE modality=? AND ts BETWEEN ? AND ? ORDER BY ts",
            (self.modality.value, t0, t1),
        )

    def all(self) -> list[HotItem]:
        return self.range(0, 10**13)

    def stats(self) -> tuple[int, int, int | None]:
        with self._lock:
            count, total, oldest = self._conn.execute(
                "SELECT COUNT(*), COALESCE(SUM(size_bytes), 0), MIN(ts) FROM hot_items"
            ).fetchone()
        return count, total, oldest

    def insert(self, item: HotItem, fault: FaultHook = _no_fault) -> None:
        with self._lock:
            fault("hot_put.index_insert")
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                self._conn.execute(
                    "INSERT INTO hot_items VALUES (?, ?, ?, ?)",
                    (item.modality.value, item.ts, item.rel_path, item.size_bytes),
                )
                fault("hot_put.index_commit")
                self._conn.execute("COMMIT")
            except sqlite3.IntegrityError:
                self._conn.execute("ROLLBACK")
                raise DuplicateItemError(item.modality.value, item.ts) from None
            except Exception:
                if self._conn.in_transaction:
                    self._conn.execute("ROLLBACK")
                raise

    def insert_many(self, items: list[HotItem]) -> list[float]:
        """Insert rows in one transaction; returns per-row statement time in ms."""
        timings = []
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                for item in items:
                    t0 = time.perf_counter()
                    self._conn.execute(
                        "INSERT INTO hot_items VALUES (?, ?, ?, ?)",
                        (item.modality.value, item.ts, item.rel_path, item.size_bytes),
                    )
                    timings.append((time.perf_counter() - t0) * 1e3)
                self._conn.execute("COMMIT")
            except sqlite3.IntegrityError as exc:
                self._conn.execute("ROLLBACK")
                raise StorageError(f"batch insert rejected: {exc}") from None
            except BaseException:
                if self._conn.in_transaction:
                    self._conn.execute("ROLLBACK")
                raise
        return timings

    def delete_range(self, t0: int, t1: int) -> int:
        with self._lock:
            self._conn.execute("BEGIN IMMEDIATE")
            cur = self._conn.execute(
                "DELETE FROM hot_items WHERE modality=? AND ts BETWEEN ? AND ?",
                (self.modality.value, t0, t1),
            )
            self._conn.execute("COMMIT")
            return cur.rowcount

    def delete(self, ts: int) -> None:
        with self._lock:
            self._conn.execute(
                "DELETE FROM hot_items WHERE modality=? AND ts=?", (self.modality.value, ts)
            )

    def size_on_disk(self) -> int:
        with self._lock:
            self._conn.execute("PRAGMA wal_checkpoint(TRUNCATE)")
        return self.path.stat().st_size


class GpsWriter:
    """Appends fixes to per-day stores with a group-commit window.

    Rows become durable when the pending batch reaches ``commit_rows`` or has
    been open for ``commit_interval_ms``. Callers driving a timer should use
    :meth:`next_deadline` and :meth:`maybe_flush`.
    """

    def __init__(self, gps_dir: Path, commit_interval_ms: int = 100, commit_rows: int = 32,
                 clock=time.monotonic):
        self.gps_dir = gps_dir
        self.interval = commit_interval_ms / 1000.0
        self.commit_rows = commit_rows
        self.clock = clock
        self._day: dt.date | None = None
        self._conn: sqlite3.Connection | None = None
        self._pending = 0
        self._opened_at = 0.0
        self._lock = threading.RLock()
        self.commits = 0

    def path_for(self, day: dt.date) -> Path:
        return self.gps_dir / f"{day.isoformat()}.db"

    def _switch_day(self, day: dt.date) -> None:
        self.flush()
        if self._conn is not None:
            self._conn.close()
        self.gps_dir.mkdir(parents=True, exist_ok=True)
        self._conn = connect(self.path_for(day))
        self._conn.execute(_GPS_SCHEMA)
        self._day = day

    def append(self, fix: GpsFix) -> bool:
        """Insert one fix; returns True if this call committed the batch."""
        day = day_of(fix.ts)
        with self._lock:
            if day != self._day:
                self._switch_day(day)
            if self._pending == 0:
                self._conn.execute("BEGIN IMMEDIATE")
                self._opened_at = self.clock()
            try:
                self._conn.execute(
                    "INSERT INTO avs_gps VALUES (?, ?, ?, ?)",
                    (fix.ts, fix.lat, fix.lon, fix.alt),
                )
            except sqlite3.IntegrityError:
                if self._pending == 0:
                    self._conn.execute("ROLLBACK")
                raise DuplicateItemError(Modality.GPS.value, fix.ts) from None
            self._pending += 1
            return self.maybe_flush()

    def next_deadline(self) -> float | None:
        with self._lock:
            return self._opened_at + self.interval if self._pending else None

    def maybe_flush(self) -> bool:
        with self._lock:
            if not self._pending:
                return False
            if self._pending >= self.commit_rows or self.clock() - self._opened_at >= self.interval:
                self.flush()
                return True
            return False

    def flush(self) -> None:
        with self._lock:
            if self._conn is not None and self._pending:
                self._conn.execute("COMMIT")
                self.commits += 1
            self._pending = 0

    def close_day(self, day: dt.date) -> None:
        with self._lock:
            if self._day == day:
                self.close()

    def close(self, commit: bool = True) -> None:
        with self._lock:
            if self._conn is None:
                return
            if commit:
                self.flush()
            elif self._conn.in_transaction:
                self._conn.execute("ROLLBACK")
            self._pending = 0
            self._conn.close()
            self._conn = None
            self._day = None


class HotStore:
    def __init__(self, root, config: EngineConfig | None = None, fault: FaultHook | None = None,
                 recover: bool = True):
        self.root = Path(root)
        self.config = config or EngineConfig(hot_root=self.root)
        self.fault = fault or _no_fault
        self.last_recovery = RecoveryReport()
        (self.root / "db").mkdir(parents=True, exist_ok=True)
        for m in Modality:
            (self.root / m.hot_dir).mkdir(exist_ok=True)
        self._index = {m: ItemIndex(self.index_path(m), m) for m in FILE_MODALITIES}
        self.gps = GpsWriter(
            self.root / Modality.GPS.hot_dir,
            self.config.gps_commit_interval_ms,
            self.config.gps_commit_rows,
        )
        self._usage_lock = threading.Lock()
        self._bytes_used = sum(idx.stats()[1] for idx in self._index.values())
        if recover:
            self.last_recovery = self.recover()

    # -- paths ------------------------------------------------------------

    def index_path(self, modality: Modality) -> Path:
        return self.root / "db" / f"avs_{modality.value}.idx"

    def day_dir(self, modality: Modality, day: dt.date) -> Path:
        return self.root / modality.hot_dir / day.isoformat()

    def abspath(self, item: HotItem) -> Path:
        return self.root / item.rel_path

    def gps_day_path(self, day: dt.date) -> Path:
        return self.gps.path_for(day)

    def index(self, modality) -> ItemIndex:
        return self._index[Modality.parse(modality)]

    # -- lifecycle --------------------------------------------------------

    def close(self) -> None:
        self.gps.close()
        for idx in self._index.values():
            idx.close()

    def abandon(self) -> None:
        """Drop connections without committing, as a process crash would."""
        self.gps.close(commit=False)
        for idx in self._index.values():
            idx.close(commit=False)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- writes -----------------------------------------------------------

    def _check_space(self, need: int) -> None:
        quota = self.config.hot_quota_bytes
        if quota and self._bytes_used + need > quota:
            raise StorageFullError("hot", need, max(quota - self._bytes_used, 0))
        free = shutil.disk_usage(self.root).free
        if need > free:
            raise StorageFullError("hot", need, free)

    def put(self, payload: bytes, modality, ts: int, fault: FaultHook | None = None) -> HotItem:
        """Durably store one file and index it (write, fsync, rename, index)."""
        fault = fault or self.fault
        modality = Modality.parse(modality)
        if modality not in FILE_MODALITIES:
            raise ValidationError("gps fixes go through gps_append")
        ts = check_ts(ts)
        if not payload:
            raise ValidationError("empty payload")
        idx = self._index[modality]
        if idx.get(ts) is not None:
            raise DuplicateItemError(modality.value, ts)
        rel = rel_path_for(modality, ts)
        final = self.root / rel
        if final.exists():
            raise DuplicateItemError(modality.value, ts)
        self._check_space(len(payload))

        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(final.name + TMP_SUFFIX)
        try:
            fault("hot_put.write_temp")
            with open(tmp, "wb") as f:
                f.write(payload)
                f.flush()
                fault("hot_put.fsync_file")
                os.fsync(f.fileno())
            fault("hot_put.rename")
            os.replace(tmp, final)
            fsync_dir(final.parent)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            if exc.errno == errno.ENOSPC:
                raise StorageFullError("hot", len(payload), 0) from exc
            raise StorageError(f"writing {final}: {exc}") from exc

        item = HotItem(modality, ts, rel, len(payload))
        try:
            idx.insert(item, fault)
        except sqlite3.Error as exc:
            raise StorageError(f"index insert for {rel}: {exc}") from exc
        with self._usage_lock:
            self._bytes_used += len(payload)
        return item

    def gps_append(self, fix: GpsFix) -> bool:
        return self.gps.append(fix)

    # -- reads ------------------------------------------------------------

    def index_range(self, modality, t0: int, t1: int) -> list[HotItem]:
        if t0 > t1:
            raise ValidationError(f"empty range: t0={t0} > t1={t1}")
        modality = Modality.parse(modality)
        if modality not in FILE_MODALITIES:
            raise ValidationError("gps has no file index; use gps_range")
        return self._index[modality].range(t0, t1)

    def read(self, item: HotItem) -> bytes:
        path = self.abspath(item)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise IntegrityError("indexed file missing", path) from None
        if len(data) != item.size_bytes:
            raise IntegrityError(f"size {len(data)} != indexed {item.size_bytes}", path)
        return data

    def gps_days(self) -> list[dt.date]:
        gps_dir = self.root / Modality.GPS.hot_dir
        if not gps_dir.is_dir():
            return []
        days = []
        for p in gps_dir.glob("*.db"):
            try:
                days.append(parse_day(p.stem))
            except ValidationError:
                continue
        return sorted(days)

    def gps_range(self, t0: int, t1: int) -> list[GpsFix]:
        if t0 > t1:
            raise ValidationError(f"empty range: t0={t0} > t1={t1}")
        out = []
        for day in self.gps_days():
            lo, hi = day_bounds(day)
            if hi < t0 or lo > t1:
                continue
            out.extend(read_gps_store(self.gps_day_path(day), t0, t1))
        return out

    def day_dirs(self, modality) -> list[dt.date]:
        base = self.root / Modality.parse(modality).hot_dir
        days = []
        for p in base.iterdir() if base.is_dir() else ():
            if p.is_dir() and not p.name.startswith("."):
                try:
                    days.append(parse_day(p.name))
                except ValidationError:
                    continue
        return sorted(days)

    def items_for_day(self, modality, day: dt.date) -> list[HotItem]:
        return self._index[Modality.parse(modality)].range(*day_bounds(day))

    def usage(self) -> HotUsage:
        bytes_by, items_by, oldest = {}, {}, []
        for m, idx in self._index.items():
            count, total, first = idx.stats()
            bytes_by[m.value], items_by[m.value] = total, count
            if first is not None:
                oldest.append(day_of(first))
        gps_days = self.gps_days()
        bytes_by["gps"] = sum(self.gps_day_path(d).stat().st_size for d in gps_days)
        items_by["gps"] = sum(count_gps_rows(self.gps_day_path(d)) for d in gps_days)
        if gps_days:
            oldest.append(gps_days[0])
        return HotUsage(bytes_by, items_by, min(oldest) if oldest else None)

    def scan_files(self, modality) -> dict[int, int]:
        """Directory walk: ts -> size for every committed data file."""
        modality = Modality.parse(modality)
        out = {}
        for day in self.day_dirs(modality):
            for p in self.day_dir(modality, day).iterdir():
                if p.name.endswith(TMP_SUFFIX):
                    continue
                stem, _, ext = p.name.partition(".")
                if ext == modality.ext and stem.isdigit():
                    out[int(stem)] = p.stat().st_size
        return out

    # -- day removal (driven by the archiver) -----------------------------

    def drop_day(self, modality, day: dt.date, fault: FaultHook | None = None) -> int:
        """Remove a day's files and rows after it has been committed to cold.

        The day directory is first renamed to a trash name, which marks the
        removal as in progress so recovery finishes it instead of
        re-indexing the files as orphans.
        """
        fault = fault or self.fault
        modality = Modality.parse(modality)
        src = self.day_dir(modality, day)
        trash = src.with_name(TRASH_PREFIX + day.isoformat())
        if src.exists():
            fault("drop.trash_rename")
            if trash.exists():
                shutil.rmtree(trash)
            os.replace(src, trash)
            fsync_dir(src.parent)
        fault("drop.index_delete")
        before = self._index[modality].stats()[1]
        removed = self._index[modality].delete_range(*day_bounds(day))
        with self._usage_lock:
            self._bytes_used -= before - self._index[modality].stats()[1]
        fault("drop.remove_files")
        if trash.exists():
            shutil.rmtree(trash)
        return removed

    def drop_gps_day(self, day: dt.date, fault: FaultHook | None = None) -> None:
        fault = fault or self.fault
        self.gps.close_day(day)
        fault("drop.gps_unlink")
        path = self.gps_day_path(day)
        path.unlink(missing_ok=True)
        for extra in (path.with_name(path.name + "-journal"),):
            extra.unlink(missing_ok=True)

    # -- recovery ---------------------------------------------------------

    def recover(self) -> RecoveryReport:
        """Reconcile the index with the file tree after an unclean stop."""
        report = RecoveryReport()
        for m in FILE_MODALITIES:
            base = self.root / m.hot_dir
            idx = self._index[m]
            for trash in sorted(base.glob(TRASH_PREFIX + "*")):
                day = parse_day(trash.name[len(TRASH_PREFIX):])
                idx.delete_range(*day_bounds(day))
                shutil.rmtree(trash)
                report.trash_completed.append(str(trash.relative_to(self.root)))
            on_disk: dict[int, Path] = {}
            for day in self.day_dirs(m):
                for p in self.day_dir(m, day).iterdir():
                    if p.name.endswith(TMP_SUFFIX):
                        p.unlink()
                        report.temp_removed.append(str(p.relative_to(self.root)))
                        continue
                    stem, _, ext = p.name.partition(".")
                    if ext == m.ext and stem.isdigit() and len(stem) == 13:
                        on_disk[int(stem)] = p
            indexed = {item.ts: item for item in idx.all()}
            for ts, item in indexed.items():
                path = on_disk.get(ts)
                if path is None or path.stat().st_size != item.size_bytes:
                    idx.delete(ts)
                    report.dangling_rows.append(item.rel_path)
                    log.warning("dropped dangling index row %s", item.rel_path)
            for ts, path in sorted(on_disk.items()):
                if ts in indexed:
                    continue
                rel = str(path.relative_to(self.root))
                if self.config.orphan_policy == "reindex" and rel == rel_path_for(m, ts):
                    idx.insert(HotItem(m, ts, rel, path.stat().st_size))
                    report.reindexed.append(rel)
                else:
                    dest = self.root / "quarantine" / rel
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(path, dest)
                    report.quarantined.append(rel)
        self._bytes_used = sum(idx.stats()[1] for idx in self._index.values())
        if not report.clean:
            log.info("hot recovery: %s", report)
        return report


def read_gps_store(path: Path, t0: int = 0, t1: int = 10**13) -> list[GpsFix]:
    conn = connect(path, readonly=True)
    try:
        rows = conn.execute(
            "SELECT ts, lat, lon, alt FROM avs_gps WHERE ts BETWEEN ? AND ? ORDER BY ts", (t0, t1)
        ).fetchall()
    except sqlite3.Error as exc:
        raise IntegrityError(f"unreadable gps store ({exc})", path) from exc
    finally:
        conn.close()
    return [GpsFix(*row) for row in rows]


def count_gps_rows(path: Path) -> int:
    conn = connect(path, readonly=True)
    try:
        return conn.execute("SELECT COUNT(*) FROM avs_gps").fetchone()[0]
    except sqlite3.Error:
        return 0
    finally:
        conn.close()


def gps_span(path: Path) -> tuple[int, int, int]:
    """(min ts, max ts, row count) of a day store."""
    conn = connect(path, readonly=True)
    try:
        lo, hi, n = conn.execute("SELECT MIN(ts), MAX(ts), COUNT(*) FROM avs_gps").fetchone()
    finally:
        conn.close()
    return lo, hi, n

