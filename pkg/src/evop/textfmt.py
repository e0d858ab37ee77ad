"""Line-oriented record format used by every evop text file.

A file starts with a header line (``evop-<kind> v1``). Every following
non-blank line is one record: a keyword, optional positional words, then
``key=value`` fields. ``#`` starts a comment. Values containing spaces are
shell-quoted.
"""

from __future__ import annotations

import os
import shlex
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from evop.errors import ParseError


@dataclass
class Record:
    keyword: str
    args: list[str]
    fields: dict[str, str]
    lineno: int = 0
    used: set[str] = field(default_factory=set, repr=False)

    def take(self, key: str, default: str | None = None) -> str | None:
        self.used.add(key)
        return self.fields.get(key, default)

    def unknown_keys(self) -> list[str]:
        return sorted(set(self.fields) - self.used)


def parse_lines(lines: Iterable[str], header: str, source: str = "<text>") -> list[Record]:
    records: list[Record] = []
    saw_header = False
    for lineno, raw in enumerate(lines, start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: {exc}") from None
        if not tokens:
            continue
        if not saw_header:
            if " ".join(tokens) != header:
                raise ParseError(f"{source}:{lineno}: expected header {header!r}")
            saw_header = True
            continue
        args: list[str] = []
        fields: dict[str, str] = {}
        for tok in tokens[1:]:
            if "=" in tok:
                key, _, value = tok.partition("=")
                if key in fields:
                    raise ParseError(f"{source}:{lineno}: duplicate field {key!r}")
                fields[key] = value
            else:
                args.append(tok)
        records.append(Record(tokens[0], args, fields, lineno))
    if not saw_header:
        raise ParseError(f"{source}: missing header {header!r}")
    return records


def parse_file(path: str | os.PathLike, header: str) -> list[Record]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    return parse_lines(text.splitlines(), header, source=str(path))


def format_record(keyword: str, args: Iterable[str] = (), fields: dict[str, object] | None = None) -> str:
    parts = [keyword, *(shlex.quote(a) for a in args)]
    for key, value in (fields or {}).items():
        parts.append(f"{key}={shlex.quote(str(value))}")
    return " ".join(parts)


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write-temp-then-rename so readers never see a half-written file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
