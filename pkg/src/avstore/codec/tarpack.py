"""Deterministic POSIX ustar packing of day directories.

Members are ``<13-digit ts>.<ext>`` sorted ascending, with mode 0644,
uid/gid 0, empty owner names and mtime equal to the member timestamp in
seconds. The archive ends with exactly two zero blocks, so packing the same
set of files always produces the same bytes.
"""

from __future__ import annotations

import io
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

from ..core import parse_ts
from ..errors import TarFormatError

BLOCK = 512
MEMBER_RE = re.compile(r"^(\d{13})\.([A-Za-z0-9]+)$")
_ZERO_BLOCK = bytes(BLOCK)


@dataclass(frozen=True)
class TarMember:
    name: str
    size: int
    offset: int  # start of member data

    @property
    def ts(self) -> int:
        return parse_ts(self.name.split(".", 1)[0])


@dataclass(frozen=True)
class TarArchive:
    path: Path
    members: tuple

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.members]


def padded(size: int) -> int:
    return -(-size // BLOCK) * BLOCK


def archive_size(sizes: Iterable[int]) -> int:
    """Exact byte size of a ustar archive holding members of these sizes."""
    return sum(BLOCK + padded(s) for s in sizes) + 2 * BLOCK


def _octal(value: int, width: int, big: bool = False) -> bytes:
    digits = f"{value:0{width - 1}o}".encode()
    if len(digits) > width - 1:
        if big and 0 <= value < 1 << (8 * (width - 1)):
            # base-256 form (leading 0x80), understood by GNU tar and Python's tarfile
            return b"\x80" + value.to_bytes(width - 1, "big")
        raise TarFormatError(f"value {value} does not fit a {width}-byte ustar field")
    return digits + b"\0"


def ustar_header(name: str, size: int, mtime: int) -> bytes:
    encoded = name.encode("ascii")
    if len(encoded) > 100:
        raise TarFormatError(f"member name too long: {name}")
    fields = [
        encoded.ljust(100, b"\0"),
        _octal(0o644, 8),
        _octal(0, 8),
        _octal(0, 8),
        _octal(size, 12),
        _octal(mtime, 12, big=True),
        b" " * 8,  # checksum placeholder
        b"0",
        bytes(100),
        b"ustar\0",
        b"00",
        bytes(32),
        bytes(32),
        _octal(0, 8),
        _octal(0, 8),
        bytes(155),
    ]
    header = b"".join(fields).ljust(BLOCK, b"\0")
    chksum = f"{sum(header):06o}".encode() + b"\0 "
    return header[:148] + chksum + header[156:]


def check_member_name(name: str) -> int:
    m = MEMBER_RE.match(name)
    if not m:
        raise TarFormatError(f"refusing foreign file {name!r}: expected <13-digit ts>.<ext>")
    return int(m.group(1))


def write_tar(out: BinaryIO, members: Iterable[tuple[str, bytes]]) -> list[TarMember]:
    """Write ``(name, data)`` pairs, which must already be in ascending order."""
    written = []
    pos = 0
    prev = None
    for name, data in members:
        ts = check_member_name(name)
        if prev is not None and name <= prev:
            raise TarFormatError(f"members not strictly ascending at {name}")
        prev = name
        out.write(ustar_header(name, len(data), ts // 1000))
        pos += BLOCK
        written.append(TarMember(name, len(data), pos))
        out.write(data)
        pad = padded(len(data)) - len(data)
        if pad:
            out.write(bytes(pad))
        pos += padded(len(data))
    out.write(_ZERO_BLOCK * 2)
    return written


def list_day_dir(day_dir) -> list[Path]:
    day_dir = Path(day_dir)
    files = sorted(day_dir.iterdir(), key=lambda p: p.name)
    for p in files:
        if not p.is_file():
            raise TarFormatError(f"refusing non-file entry {p}")
        check_member_name(p.name)
    if not files:
        raise TarFormatError(f"nothing to archive in {day_dir}")
    return files


def tar_pack(day_dir, out_path, durable: bool = True) -> TarArchive:
    """Pack every ``<ts>.<ext>`` file in ``day_dir`` into ``out_path``."""
    files = list_day_dir(day_dir)
    out_path = Path(out_path)
    with open(out_path, "wb") as out:
        members = write_tar(out, ((p.name, p.read_bytes()) for p in files))
        out.flush()
        if durable:
            os.fsync(out.fileno())
    return TarArchive(out_path, tuple(members))


def pack_bytes(items: dict[str, bytes]) -> bytes:
    """In-memory variant: archive bytes as a pure function of the name->data map."""
    buf = io.BytesIO()
    write_tar(buf, sorted(items.items()))
    return buf.getvalue()


# --------------------------------------------------------------------------
# reading


def _parse_octal(field: bytes) -> int:
    text = field.rstrip(b"\0 ").strip()
    if not text:
        return 0
    try:
        return int(text, 8)
    except ValueError:
        raise TarFormatError(f"bad octal field {field!r}") from None


def scan_members(path) -> TarArchive:
    """Walk the header chain and build the member offset table."""
    path = Path(path)
    members = []
    with open(path, "rb") as f:
        total = os.fstat(f.fileno()).st_size
        pos = 0
        while True:
            header = f.read(BLOCK)
            if len(header) < BLOCK:
                raise TarFormatError(f"{path}: truncated header at offset {pos}")
            if header == _ZERO_BLOCK:
                break
            stored = _parse_octal(header[148:156])
            if stored != sum(header[:148]) + 8 * 32 + sum(header[156:]):
                raise TarFormatError(f"{path}: header checksum mismatch at offset {pos}")
            if header[257:263] != b"ustar\0":
                raise TarFormatError(f"{path}: not a ustar header at offset {pos}")
            name = header[:100].rstrip(b"\0").decode("ascii")
            size = _parse_octal(header[124:136])
            data_at = pos + BLOCK
            if data_at + size > total:
                raise TarFormatError(f"{path}: member {name} runs past end of file")
            members.append(TarMember(name, size, data_at))
            pos = data_at + padded(size)
            f.seek(pos)
    return TarArchive(path, tuple(members))


class MemberIndex:
    """Per-tar member tables, built once and reused while the file is unchanged."""

    def __init__(self):
        self._cache: dict[Path, tuple[tuple[int, int], TarArchive, dict]] = {}
        self._lock = threading.Lock()

    def get(self, path) -> tuple[TarArchive, dict[str, TarMember]]:
        path = Path(path)
        st = path.stat()
        stamp = (st.st_size, st.st_mtime_ns)
        with self._lock:
            hit = self._cache.get(path)
            if hit and hit[0] == stamp:
                return hit[1], hit[2]
        archive = scan_members(path)
        by_name = {m.name: m for m in archive.members}
        with self._lock:
            self._cache[path] = (stamp, archive, by_name)
        return archive, by_name

    def invalidate(self, path=None) -> None:
        with self._lock:
            if path is None:
                self._cache.clear()
            else:
                self._cache.pop(Path(path), None)


MEMBERS = MemberIndex()


def read_member(path, member: TarMember) -> bytes:
    with open(path, "rb") as f:
        f.seek(member.offset)
        data = f.read(member.size)
    if len(data) != member.size:
        raise TarFormatError(f"{path}: member {member.name} truncated")
    return data


def tar_unpack_member(tar_path, name: str) -> bytes:
    _, by_name = MEMBERS.get(tar_path)
    try:
        member = by_name[name]
    except KeyError:
        raise TarFormatError(f"{tar_path}: no member {name!r}") from None
    return read_member(tar_path, member)
