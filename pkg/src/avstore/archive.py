"""Cold-tier archival: day directories become ustar files, GPS day stores are
copied, a catalog on the cold tier records what went where.

Cold layout under ``cold_root``::

    archive_image/YYYY/MM/YYYY-MM-DD.tar
    archive_lidar/YYYY/MM/YYYY-MM-DD.tar
    archive_gps/YYYY/MM/YYYY-MM-DD.db
    db/avs_archive.idx

Every day goes copy -> fsync -> verify -> rename -> catalog row -> hot
removal. A crash anywhere leaves either untouched hot data or a committed
catalog row whose hot leftovers the next run removes.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import logging
import os
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .codec.tarpack import MEMBERS, archive_size, read_member, scan_members, tar_pack
from .core import FILE_MODALITIES, EngineConfig, Modality, day_bounds, day_of, render_ts
from .errors import ArchiveError, StorageFullError, ValidationError
from .hotstore import TRASH_PREFIX, HotStore, _no_fault, connect, fsync_dir, gps_span

log = logging.getLogger(__name__)

ARCHIVE_STEPS = (
    "archive.pack_temp",
    "archive.fsync_tar",
    "archive.rename_tar",
    "archive.catalog_insert",
    "archive.catalog_commit",
    "drop.trash_rename",
    "drop.index_delete",
    "drop.remove_files",
)
ARCHIVE_GPS_STEPS = (
    "archive.gps_copy",
    "archive.gps_fsync",
    "archive.gps_rename",
    "archive.catalog_insert",
    "archive.catalog_commit",
    "drop.gps_unlink",
)


@dataclass(frozen=True)
class ArchiveEntry:
    modality: Modality
    day: dt.date
    rel_path: str
    ts_begin: int
    ts_end: int
    item_count: int
    archived_at: int


@dataclass(frozen=True)
class PlanItem:
    modality: Modality
    day: dt.date
    item_count: int
    size_bytes: int
    dest: str
    resume: bool


def cold_rel_path(modality: Modality, day: dt.date) -> str:
    ext = "db" if modality is Modality.GPS else "tar"
    return f"archive_{modality.value}/{day:%Y}/{day:%m}/{day.isoformat()}.{ext}"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Catalog:
    """Archive catalog: one table per modality, keyed by day."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = connect(self.path, wal=True)
        self._lock = threading.RLock()
        for m in Modality:
            self._conn.execute(
                f"""CREATE TABLE IF NOT EXISTS archive_{m.value} (
                    day TEXT PRIMARY KEY,
                    rel_path TEXT NOT NULL,
                    ts_begin INTEGER NOT NULL,
                    ts_end INTEGER NOT NULL,
                    item_count INTEGER NOT NULL,
                    archived_at INTEGER NOT NULL
                )"""
            )
            self._conn.execute(
                f"CREATE INDEX IF NOT EXISTS archive_{m.value}_span "
                f"ON archive_{m.value} (ts_begin, ts_end)"
            )

    def close(self, commit: bool = True) -> None:
        with self._lock:
            if self._conn is None:
                return
            if self._conn.in_transaction:
                (self._conn.commit if commit else self._conn.rollback)()
            self._conn.close()
            self._conn = None

    def _fetch(self, sql, args=()):
        with self._lock:
            return self._conn.execute(sql, args).fetchall()

    @staticmethod
    def _entry(modality, row) -> ArchiveEntry:
        day, rel, t0, t1, n, at = row
        return ArchiveEntry(modality, dt.date.fromisoformat(day), rel, t0, t1, n, at)

    def insert(self, entry: ArchiveEntry, fault=_no_fault) -> None:
        with self._lock:
            fault("archive.catalog_insert")
            self._conn.execute("BEGIN IMMEDIATE")
            try:
                self._conn.execute(
                    f"INSERT INTO archive_{entry.modality.value} VALUES (?, ?, ?, ?, ?, ?)",
                    (entry.day.isoformat(), entry.rel_path, entry.ts_begin, entry.ts_end,
                     entry.item_count, entry.archived_at),
                )
                fault("archive.catalog_commit")
                self._conn.execute("COMMIT")
            except Exception:
                if self._conn.in_transaction:
                    self._conn.execute("ROLLBACK")
                raise

    def get(self, modality, day: dt.date) -> ArchiveEntry | None:
        modality = Modality.parse(modality)
        rows = self._fetch(
            f"SELECT * FROM archive_{modality.value} WHERE day=?", (day.isoformat(),)
        )
        return self._entry(modality, rows[0]) if rows else None

    def lookup(self, modality, t0: int, t1: int) -> list[ArchiveEntry]:
        """Entries whose closed span overlaps the closed window [t0, t1]."""
        if t0 > t1:
            raise ValidationError(f"empty range: t0={t0} > t1={t1}")
        modality = Modality.parse(modality)
        rows = self._fetch(
            f"SELECT * FROM archive_{modality.value} WHERE ts_begin <= ? AND ts_end >= ? "
            "ORDER BY ts_begin",
            (t1, t0),
        )
        return [self._entry(modality, r) for r in rows]

    def all(self, modality) -> list[ArchiveEntry]:
        modality = Modality.parse(modality)
        rows = self._fetch(f"SELECT * FROM archive_{modality.value} ORDER BY ts_begin")
        return [self._entry(modality, r) for r in rows]


class Archiver:
    def __init__(self, hot: HotStore, cold_root=None, config: EngineConfig | None = None,
                 fault: Callable[[str], None] | None = None, clock=None):
        self.hot = hot
        self.config = config or hot.config
        self.cold_root = Path(cold_root if cold_root is not None else self.config.cold_root)
        self.cold_root.mkdir(parents=True, exist_ok=True)
        self.catalog = Catalog(self.cold_root / "db" / "avs_archive.idx")
        self.fault = fault or _no_fault
        self.clock = clock or (lambda: int(time.time() * 1000))

    def close(self) -> None:
        self.catalog.close()

    def abandon(self) -> None:
        self.catalog.close(commit=False)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def cold_path(self, entry_or_rel) -> Path:
        rel = entry_or_rel.rel_path if isinstance(entry_or_rel, ArchiveEntry) else entry_or_rel
        return self.cold_root / rel

    def catalog_lookup(self, modality, t0: int, t1: int) -> list[ArchiveEntry]:
        return self.catalog.lookup(modality, t0, t1)

    # -- planning ---------------------------------------------------------

    def _eligible_days(self, modality: Modality, cutoff: dt.date) -> list[dt.date]:
        if modality is Modality.GPS:
            return [d for d in self.hot.gps_days() if d < cutoff]
        days = {d for d in self.hot.day_dirs(modality) if d < cutoff}
        base = self.hot.root / modality.hot_dir
        for trash in base.glob(TRASH_PREFIX + "*"):
            day = dt.date.fromisoformat(trash.name[len(TRASH_PREFIX):])
            if day < cutoff:
                days.add(day)
        cutoff_ms = day_bounds(cutoff)[0]
        days.update(day_of(i.ts) for i in self.hot.index_range(modality, 0, cutoff_ms - 1))
        return sorted(days)

    def plan(self, cutoff: dt.date) -> list[PlanItem]:
        out = []
        for m in Modality:
            for day in self._eligible_days(m, cutoff):
                resume = self.catalog.get(m, day) is not None
                if m is Modality.GPS:
                    path = self.hot.gps_day_path(day)
                    n = gps_span(path)[2] if path.exists() else 0
                    size = path.stat().st_size if path.exists() else 0
                else:
                    items = self.hot.items_for_day(m, day)
                    n = len(items)
                    size = archive_size(i.size_bytes for i in items) if items else 0
                out.append(PlanItem(m, day, n, size, cold_rel_path(m, day), resume))
        return out

    # -- execution --------------------------------------------------------

    def _cold_used(self) -> int:
        total = 0
        for dirpath, _, files in os.walk(self.cold_root):
            for name in files:
                total += os.path.getsize(os.path.join(dirpath, name))
        return total

    def _check_cold_space(self, need: int) -> None:
        quota = self.config.cold_quota_bytes
        if quota:
            used = self._cold_used()
            if used + need > quota:
                raise StorageFullError("cold", need, max(quota - used, 0))
        free = shutil.disk_usage(self.cold_root).free
        if need > free:
            raise StorageFullError("cold", need, free)

    def _sweep_temps(self) -> None:
        for m in Modality:
            base = self.cold_root / f"archive_{m.value}"
            if base.is_dir():
                for tmp in base.rglob(".*.tmp"):
                    tmp.unlink()

    def archive_before(self, cutoff: dt.date) -> list[ArchiveEntry]:
        """Archive every hot day strictly before ``cutoff``.

        Returns the entries this call committed or finished removing.
        """
        self._sweep_temps()
        done = []
        for m in FILE_MODALITIES:
            for day in self._eligible_days(m, cutoff):
                entry = self._archive_file_day(m, day)
                if entry is not None:
                    done.append(entry)
        for day in self._eligible_days(Modality.GPS, cutoff):
            entry = self._archive_gps_day(day)
            if entry is not None:
                done.append(entry)
        return done

    def _verify_tar(self, tar_path: Path, items) -> None:
        archive = scan_members(tar_path)
        by_name = {mem.name: mem for mem in archive.members}
        expected = {f"{render_ts(i.ts)}.{i.modality.ext}": i for i in items}
        if set(by_name) != set(expected):
            raise ArchiveError(
                f"{tar_path}: members {len(by_name)} do not match hot index ({len(expected)})"
            )
        for name, item in expected.items():
            member = by_name[name]
            if member.size != item.size_bytes:
                raise ArchiveError(f"{tar_path}: {name} size {member.size} != {item.size_bytes}")
            if _sha256(read_member(tar_path, member)) != _sha256(self.hot.read(item)):
                raise ArchiveError(f"{tar_path}: {name} content differs from hot copy")

    def _archive_file_day(self, m: Modality, day: dt.date) -> ArchiveEntry | None:
        items = self.hot.items_for_day(m, day)
        committed = self.catalog.get(m, day)
        if committed is not None:
            # resume: cold copy is authoritative, clear what is left on hot
            tar_path = self.cold_path(committed)
            if not tar_path.exists():
                raise ArchiveError(f"catalog row for {m.value} {day} but {tar_path} is missing")
            if items:
                _, by_name = MEMBERS.get(tar_path)
                for item in items:
                    name = f"{render_ts(item.ts)}.{m.ext}"
                    member = by_name.get(name)
                    if member is None or read_member(tar_path, member) != self.hot.read(item):
                        raise ArchiveError(f"hot item {item.rel_path} not in committed {tar_path}")
            leftover = bool(items) or self.hot.day_dir(m, day).exists() or (
                self.hot.root / m.hot_dir / (TRASH_PREFIX + day.isoformat())).exists()
            self.hot.drop_day(m, day, self.fault)
            return committed if leftover else None

        day_dir = self.hot.day_dir(m, day)
        if not items:
            if day_dir.is_dir() and not any(day_dir.iterdir()):
                day_dir.rmdir()
            return None

        rel = cold_rel_path(m, day)
        final = self.cold_root / rel
        self._check_cold_space(archive_size(i.size_bytes for i in items))
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(f".{final.name}.tmp")
        try:
            self.fault("archive.pack_temp")
            tar_pack(day_dir, tmp, durable=False)
            self.fault("archive.fsync_tar")
            with open(tmp, "rb+") as f:
                os.fsync(f.fileno())
            self._verify_tar(tmp, items)
        except Exception:
            tmp.unlink(missing_ok=True)
            raise
        self.fault("archive.rename_tar")
        os.replace(tmp, final)
        fsync_dir(final.parent)
        MEMBERS.invalidate(final)

        entry = ArchiveEntry(m, day, rel, items[0].ts, items[-1].ts, len(items), self.clock())
        self.catalog.insert(entry, self.fault)
        self.hot.drop_day(m, day, self.fault)
        log.info("archived %s %s: %d items -> %s", m.value, day, len(items), rel)
        return entry

    def _archive_gps_day(self, day: dt.date) -> ArchiveEntry | None:
        src = self.hot.gps_day_path(day)
        self.hot.gps.close_day(day)
        committed = self.catalog.get(Modality.GPS, day)
        if committed is not None:
            cold = self.cold_path(committed)
            if not cold.exists():
                raise ArchiveError(f"catalog row for gps {day} but {cold} is missing")
            if src.exists():
                if _file_sha256(src) != _file_sha256(cold):
                    raise ArchiveError(f"hot gps store {src} differs from committed {cold}")
                self.hot.drop_gps_day(day, self.fault)
                return committed
            return None
        if not src.exists():
            return None

        # settle any hot journal left by a crashed writer before copying
        conn = connect(src)
        conn.execute("SELECT COUNT(*) FROM avs_gps").fetchone()
        conn.close()
        lo, hi, n = gps_span(src)
        if n == 0:
            self.hot.drop_gps_day(day, self.fault)
            return None

        rel = cold_rel_path(Modality.GPS, day)
        final = self.cold_root / rel
        self._check_cold_space(src.stat().st_size)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(f".{final.name}.tmp")
        try:
            self.fault("archive.gps_copy")
            shutil.copyfile(src, tmp)
            self.fault("archive.gps_fsync")
            with open(tmp, "rb+") as f:
                os.fsync(f.fileno())
            if _file_sha256(tmp) != _file_sha256(src):
                raise ArchiveError(f"gps copy of {src} does not match")
        except Exception:
            tmp.unlink(missing_ok=True)
            raise
        self.fault("archive.gps_rename")
        os.replace(tmp, final)
        fsync_dir(final.parent)

        entry = ArchiveEntry(Modality.GPS, day, rel, lo, hi, n, self.clock())
        self.catalog.insert(entry, self.fault)
        self.hot.drop_gps_day(day, self.fault)
        log.info("archived gps %s: %d rows -> %s", day, n, rel)
        return entry
