"""Input and output formats, implemented against their documented layouts.

Inputs are JSON Lines: catalogs carry {"code", "label", "label_en"?},
records carry {"id", "title"?, "abstract"?}. Output is the .nbemb
container (all integers little-endian):

    bytes 0-3   magic "NBE1"
    u32         format version, currently 1
    u32         dim (columns per row, > 0)
    u64         row count
    id block    per row: u16 byte length + that many UTF-8 bytes
    payload     row count x dim float32, row-major

The writer enforces the consumer's validation rules up front (unique
nonempty ids, finite float32 values) so an emitted file is always
readable, and it writes atomically: temp file in the target directory,
then rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import InputError

MAGIC = b"NBE1"
VERSION = 1


@dataclass
class CatalogEntry:
    code: str
    label: str
    label_en: str | None = None


@dataclass
class Record:
    id: str
    title: str
    abstract: str


def _jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{ln}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise InputError(f"{path}:{ln}: expected a JSON object")
            yield ln, obj


def read_catalog(path) -> list[CatalogEntry]:
    entries: list[CatalogEntry] = []
    seen: set[str] = set()
    for ln, obj in _jsonl(path):
        code = obj.get("code")
        label = obj.get("label")
        if not isinstance(code, str) or not code:
            raise InputError(f"{path}:{ln}: 'code' must be a nonempty string")
        if not isinstance(label, str):
            raise InputError(f"{path}:{ln}: 'label' must be a string")
        label_en = obj.get("label_en")
        if label_en is not None and not isinstance(label_en, str):
            raise InputError(f"{path}:{ln}: 'label_en' must be a string when present")
        if code in seen:
            raise InputError(f"{path}:{ln}: duplicate subject code {code!r}")
        seen.add(code)
        entries.append(CatalogEntry(code, label, label_en))
    return entries


def read_records(path) -> list[Record]:
    records: list[Record] = []
    seen: set[str] = set()
    for ln, obj in _jsonl(path):
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise InputError(f"{path}:{ln}: 'id' must be a nonempty string")
        title = obj.get("title", "")
        abstract = obj.get("abstract", "")
        if not isinstance(title, str) or not isinstance(abstract, str):
            raise InputError(f"{path}:{ln}: title/abstract must be strings")
        if rid in seen:
            raise InputError(f"{path}:{ln}: duplicate record id {rid!r}")
        seen.add(rid)
        records.append(Record(rid, title, abstract))
    return records


def write_container(ids: list[str], vectors: np.ndarray, path) -> None:
    """Write one embedding container, atomically."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[1] < 1:
        raise InputError(f"vectors must be 2-D with dim >= 1, got shape {vectors.shape}")
    if len(ids) != vectors.shape[0]:
        raise InputError(f"{len(ids)} ids for {vectors.shape[0]} rows")
    if not np.isfinite(vectors).all():
        raise InputError("vectors contain non-finite values")
    seen: set[str] = set()
    blob = bytearray()
    for rid in ids:
        if not isinstance(rid, str) or not rid:
            raise InputError("ids must be nonempty strings")
        if rid in seen:
            raise InputError(f"duplicate id {rid!r}")
        seen.add(rid)
        raw = rid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InputError(f"id longer than 65535 bytes: {rid[:40]!r}...")
        blob += np.uint16(len(raw)).astype("<u2").tobytes()
        blob += raw

    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".nbemb.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint32(VERSION).astype("<u4").tobytes())
            fh.write(np.uint32(vectors.shape[1]).astype("<u4").tobytes())
            fh.write(np.uint64(vectors.shape[0]).astype("<u8").tobytes())
            fh.write(bytes(blob))
            fh.write(vectors.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
