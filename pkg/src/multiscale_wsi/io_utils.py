"""Small file helpers shared by the modules: atomic writes, CSV with provenance comments, hashing."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path


class FormatError(ValueError):
    """A file does not follow its documented layout."""


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def provenance_line(**fields) -> str:
    """A ``# key=value ...`` comment line; CSV readers here skip leading ``#`` lines."""
    return "# " + " ".join(f"{k}={fields[k]}" for k in sorted(fields)) + "\n"


def read_csv_rows(path, header) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        got = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: empty file") from None
    if tuple(got) != tuple(header):
        raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise FormatError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
        rows.append(dict(zip(header, rec)))
    return rows


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(*parts) -> int:
    """64-bit seed derived from arbitrary printable parts (ints, strings)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")
