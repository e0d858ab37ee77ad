"""Append-only, checksummed journal backing the Active Sessions cache.

File layout::

    b"evop-sessions v1\\n"
    repeated: u32 big-endian payload length | payload (UTF-8 JSON) | u32 CRC-32 of payload

Replay stops at the first record that is short, fails its checksum or does
not decode; everything before it is the valid prefix.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

from evop.errors import CorruptCache

HEADER = b"evop-sessions v1\n"
_U32 = struct.Struct(">I")
MAX_RECORD = 16 * 1024 * 1024


@dataclass(frozen=True)
class ReplayReport:
    records: int
    valid_bytes: int
    total_bytes: int
    reason: str | None = None

    @property
    def truncated(self) -> bool:
        return self.valid_bytes < self.total_bytes

    @property
    def discarded_bytes(self) -> int:
        return self.total_bytes - self.valid_bytes


def encode_record(payload: dict) -> bytes:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _U32.pack(len(body)) + body + _U32.pack(zlib.crc32(body))


def scan(data: bytes) -> tuple[list[dict], ReplayReport]:
    """Decode the valid prefix of a journal image."""
    total = len(data)
    if total < len(HEADER):
        if HEADER.startswith(data):
            reason = "torn header" if total else None
            return [], ReplayReport(0, 0, total, reason)
        raise CorruptCache("not an evop-sessions journal")
    if not data.startswith(HEADER):
        raise CorruptCache("not an evop-sessions journal")
    pos = len(HEADER)
    payloads: list[dict] = []
    reason = None
    while pos < total:
        if total - pos < _U32.size:
            reason = "torn length prefix"
            break
        (length,) = _U32.unpack_from(data, pos)
        if length > MAX_RECORD:
            reason = f"implausible record length {length}"
            break
        end = pos + _U32.size + length + _U32.size
        if end > total:
            reason = "torn record"
            break
        body = data[pos + _U32.size : pos + _U32.size + length]
        (crc,) = _U32.unpack_from(data, end - _U32.size)
        if zlib.crc32(body) != crc:
            reason = "checksum mismatch"
            break
        try:
            payload = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            reason = "undecodable payload"
            break
        payloads.append(payload)
        pos = end
    return payloads, ReplayReport(len(payloads), pos, total, reason)


class SessionJournal:
    def __init__(self, path: str | os.PathLike, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self.records = 0

    def replay(self, repair: bool = True) -> tuple[list[dict], ReplayReport]:
        """Read the valid prefix; with ``repair`` cut the file back to it."""
        data = self.path.read_bytes() if self.path.exists() else b""
        payloads, report = scan(data)
        self.records = report.records
        if repair:
            if report.valid_bytes < len(HEADER):
                self._rewrite([])
            elif report.truncated:
                with open(self.path, "r+b") as fh:
                    fh.truncate(report.valid_bytes)
        return payloads, report

    def append(self, payload: dict) -> None:
        if not self.path.exists() or self.path.stat().st_size == 0:
            self._rewrite([])
        with open(self.path, "ab") as fh:
            fh.write(encode_record(payload))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        self.records += 1

    def compact(self, payloads: list[dict]) -> None:
        self._rewrite(payloads)

    def _rewrite(self, payloads: list[dict]) -> None:
        tmp = self.path.with_name(self.path.name + ".compact")
        with open(tmp, "wb") as fh:
            fh.write(HEADER)
            for p in payloads:
                fh.write(encode_record(p))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        self.records = len(payloads)
