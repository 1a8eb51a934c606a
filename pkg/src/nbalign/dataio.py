"""File formats: the .nbemb embedding container and the JSONL/TSV text side.

.nbemb layout (all integers little-endian):

    bytes 0-3   magic "NBE1"
    u32         format version, currently 1
    u32         dim (columns per row, > 0)
    u64         row count
    id block    per row: u16 byte length + that many UTF-8 bytes
    payload     row count x dim float32, row-major

Readers never partially succeed: any structural or content problem raises
before an object is built. Text formats are JSON Lines (records, catalogs,
gold, predictions) and tab-separated judgments; parse errors carry 1-based
line numbers.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractViolation,
    CorruptionError,
    FormatError,
    JoinError,
    ParseError,
    ValidationError,
)
from .metrics import GoldLabels, JudgmentSet
from .objective import TrainingExample, gold_average

log = logging.getLogger(__name__)

NBEMB_MAGIC = b"NBE1"
NBEMB_VERSION = 1

_LIST_CAP = 20


@dataclass
class EmbeddingMatrix:
    """Row-major float32 matrix with one unique string id per row."""

    ids: list[str]
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ContractViolation(f"embedding data must be 2-D, got {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        if len(self.ids) != self.data.shape[0]:
            raise ContractViolation(
                f"{len(self.ids)} ids for {self.data.shape[0]} rows"
            )
        if self.data.shape[1] < 1:
            raise ContractViolation("embedding dim must be >= 1")
        seen: dict[str, int] = {}
        for i, rid in enumerate(self.ids):
            if not isinstance(rid, str) or not rid:
                raise ValidationError(f"row {i}: id must be a nonempty string")
            if rid in seen:
                raise ValidationError(f"duplicate id {rid!r} at rows {seen[rid]} and {i}")
            seen[rid] = i
        if not np.isfinite(self.data).all():
            bad = int(np.flatnonzero(~np.isfinite(self.data).all(axis=1))[0])
            raise ValidationError(f"non-finite embedding values at row {bad}")
        self.id_to_row: dict[str, int] = seen

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


def write_embeddings(matrix: EmbeddingMatrix, path: str | os.PathLike) -> None:
    ids_blob = bytearray()
    for rid in matrix.ids:
        raw = rid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractViolation(f"id longer than 65535 bytes: {rid[:40]!r}...")
        ids_blob += np.uint16(len(raw)).astype("<u2").tobytes()
        ids_blob += raw
    with open(path, "wb") as fh:
        fh.write(NBEMB_MAGIC)
        fh.write(np.uint32(NBEMB_VERSION).astype("<u4").tobytes())
        fh.write(np.uint32(matrix.dim).astype("<u4").tobytes())
        fh.write(np.uint64(len(matrix.ids)).astype("<u8").tobytes())
        fh.write(bytes(ids_blob))
        fh.write(np.ascontiguousarray(matrix.data, dtype="<f4").tobytes())


def read_embeddings(path: str | os.PathLike) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise FormatError(f"{path}: too short to be an embedding container")
    if raw[:4] != NBEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {NBEMB_MAGIC!r}")
    version = int(np.frombuffer(raw, "<u4", count=1, offset=4)[0])
    if version != NBEMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dim = int(np.frombuffer(raw, "<u4", count=1, offset=8)[0])
    if dim == 0:
        raise FormatError(f"{path}: dim = 0")
    rows = int(np.frombuffer(raw, "<u8", count=1, offset=12)[0])
    ids: list[str] = []
    off = 20
    for i in range(rows):
        if off + 2 > len(raw):
            raise CorruptionError(f"{path}: id block truncated at row {i}")
        idlen = int(np.frombuffer(raw, "<u2", count=1, offset=off)[0])
        off += 2
        if off + idlen > len(raw):
            raise CorruptionError(f"{path}: id bytes truncated at row {i}")
        try:
            ids.append(raw[off : off + idlen].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"{path}: row {i} id is not valid UTF-8: {exc}") from exc
        off += idlen
    payload_bytes = rows * dim * 4
    if off + payload_bytes > len(raw):
        raise CorruptionError(
            f"{path}: payload truncated ({len(raw) - off} bytes for {payload_bytes} expected)"
        )
    if off + payload_bytes != len(raw):
        raise CorruptionError(
            f"{path}: {len(raw) - off - payload_bytes} trailing bytes after payload"
        )
    data = np.frombuffer(raw, "<f4", count=rows * dim, offset=off).reshape(rows, dim)
    return EmbeddingMatrix(ids, np.ascontiguousarray(data, dtype=np.float32))


# ---------------------------------------------------------------------------
# JSON Lines / TSV text formats
# ---------------------------------------------------------------------------


@dataclass
class Record:
    id: str
    title: str
    abstract: str
    subjects: list[str]


@dataclass
class RecordSet:
    records: list[Record]
    by_id: dict[str, Record] = field(init=False)

    def __post_init__(self):
        self.by_id = {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _jsonl_lines(path):
    """Yield (1-based line number, parsed object) skipping blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{ln}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{ln}: expected a JSON object")
            yield ln, obj


def _require_str(obj: dict, key: str, path, ln: int, allow_empty: bool = False) -> str:
    if key not in obj:
        raise ParseError(f"{path}:{ln}: missing {key!r}")
    v = obj[key]
    if not isinstance(v, str) or (not allow_empty and not v):
        raise ParseError(f"{path}:{ln}: {key!r} must be a nonempty string")
    return v


def _str_list(obj: dict, key: str, path, ln: int) -> list[str]:
    v = obj.get(key, [])
    if not isinstance(v, list) or any(not isinstance(c, str) or not c for c in v):
        raise ParseError(f"{path}:{ln}: {key!r} must be a list of nonempty strings")
    return v


def read_records(path: str | os.PathLike) -> RecordSet:
    """JSONL records: {"id", "title"?, "abstract"?, "subjects"?: [codes]}.

    Extra fields are tolerated. Each record needs a nonempty title or
    abstract; subjects default to empty (blind test records).
    """
    records: list[Record] = []
    seen: dict[str, int] = {}
    for ln, obj in _jsonl_lines(path):
        rid = _require_str(obj, "id", path, ln)
        title = obj.get("title", "")
        abstract = obj.get("abstract", "")
        if not isinstance(title, str) or not isinstance(abstract, str):
            raise ParseError(f"{path}:{ln}: title/abstract must be strings")
        if not title and not abstract:
            raise ValidationError(f"{path}:{ln}: record {rid!r} has neither title nor abstract")
        if rid in seen:
            raise ValidationError(f"{path}:{ln}: duplicate record id {rid!r} (first at line {seen[rid]})")
        seen[rid] = ln
        records.append(Record(rid, title, abstract, _str_list(obj, "subjects", path, ln)))
    return RecordSet(records)


@dataclass
class CatalogEntry:
    code: str
    label: str
    label_en: str | None = None


@dataclass
class SubjectCatalog:
    entries: list[CatalogEntry]
    by_code: dict[str, CatalogEntry] = field(init=False)

    def __post_init__(self):
        self.by_code = {e.code: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def read_catalog(path: str | os.PathLike) -> SubjectCatalog:
    """JSONL catalog: {"code", "label", "label_en"?}."""
    entries: list[CatalogEntry] = []
    seen: dict[str, int] = {}
    for ln, obj in _jsonl_lines(path):
        code = _require_str(obj, "code", path, ln)
        label = _require_str(obj, "label", path, ln)
        label_en = obj.get("label_en")
        if label_en is not None and (not isinstance(label_en, str) or not label_en):
            raise ParseError(f"{path}:{ln}: 'label_en' must be a nonempty string when present")
        if code in seen:
            raise ValidationError(f"{path}:{ln}: duplicate subject code {code!r} (first at line {seen[code]})")
        seen[code] = ln
        entries.append(CatalogEntry(code, label, label_en))
    return SubjectCatalog(entries)


def read_gold(path: str | os.PathLike) -> GoldLabels:
    """JSONL gold labels: {"id", "subjects": [codes, nonempty]}.

    A records file works here as long as every line carries subjects.
    """
    by_id: dict[str, frozenset[str]] = {}
    lines: dict[str, int] = {}
    for ln, obj in _jsonl_lines(path):
        rid = _require_str(obj, "id", path, ln)
        codes = _str_list(obj, "subjects", path, ln)
        if not codes:
            raise ValidationError(f"{path}:{ln}: gold subjects for {rid!r} are empty")
        if rid in by_id:
            raise ValidationError(f"{path}:{ln}: duplicate gold id {rid!r} (first at line {lines[rid]})")
        lines[rid] = ln
        by_id[rid] = frozenset(codes)
    return GoldLabels(by_id)


def read_judgments(path: str | os.PathLike) -> JudgmentSet:
    """TSV judgments: record_id<TAB>code<TAB>label, label in {Y, I, N}.

    A blank or missing third field reads as N.
    """
    by_record: dict[str, dict[str, str]] = {}
    for ln_no, line in enumerate(open(path, "r", encoding="utf-8"), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError(f"{path}:{ln_no}: expected 2 or 3 tab-separated fields, got {len(parts)}")
        rid, code = parts[0], parts[1]
        label = parts[2].strip() if len(parts) == 3 else ""
        if not rid or not code:
            raise ParseError(f"{path}:{ln_no}: empty record id or code")
        if label == "":
            label = "N"
        if label not in ("Y", "I", "N"):
            raise ValidationError(f"{path}:{ln_no}: unknown judgment label {label!r}")
        pool = by_record.setdefault(rid, {})
        if code in pool:
            raise ValidationError(f"{path}:{ln_no}: duplicate judgment for ({rid!r}, {code!r})")
        pool[code] = label
    return JudgmentSet(by_record)


@dataclass
class Prediction:
    id: str
    codes: list[str]
    distances: list[float]


def write_predictions(preds, path: str | os.PathLike) -> None:
    """JSONL predictions: {"id", "codes", "distances"}, distances at 6 decimals.

    Accepts any iterable of objects with id/codes/distances attributes
    (retrieval results) or (id, codes, distances) triples.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for item in preds:
            if hasattr(item, "codes"):
                rid = item.article_id if hasattr(item, "article_id") else item.id
                codes, dists = list(item.codes), list(item.distances)
            else:
                rid, codes, dists = item[0], list(item[1]), list(item[2])
            if len(codes) != len(dists):
                raise ContractViolation(
                    f"prediction {rid!r}: {len(codes)} codes vs {len(dists)} distances"
                )
            if len(set(codes)) != len(codes):
                raise ContractViolation(f"prediction {rid!r}: duplicate codes")
            row = {
                "id": rid,
                "codes": codes,
                "distances": [round(float(x), 6) for x in dists],
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_predictions(path: str | os.PathLike) -> list[Prediction]:
    preds: list[Prediction] = []
    seen: dict[str, int] = {}
    for ln, obj in _jsonl_lines(path):
        rid = _require_str(obj, "id", path, ln)
        codes = _str_list(obj, "codes", path, ln)
        dists = obj.get("distances")
        if not isinstance(dists, list) or any(
            not isinstance(x, (int, float)) or isinstance(x, bool) for x in dists
        ):
            raise ParseError(f"{path}:{ln}: 'distances' must be a list of numbers")
        if len(codes) != len(dists):
            raise ValidationError(
                f"{path}:{ln}: {len(codes)} codes vs {len(dists)} distances"
            )
        if len(set(codes)) != len(codes):
            raise ValidationError(f"{path}:{ln}: duplicate codes for {rid!r}")
        if rid in seen:
            raise ValidationError(f"{path}:{ln}: duplicate prediction id {rid!r}")
        seen[rid] = ln
        preds.append(Prediction(rid, codes, [float(x) for x in dists]))
    return preds


def join_examples(
    records: RecordSet,
    articles: EmbeddingMatrix,
    subjects: EmbeddingMatrix,
    catalog: SubjectCatalog,
) -> list[TrainingExample]:
    """Resolve records against embeddings into training examples.

    Every record id must have an article embedding; every gold code must
    exist in the catalog and have a subject embedding. Records with empty
    gold sets are skipped with a warning count. Positives are computed as
    double-precision means of the base subject rows, stored as float32.
    """
    missing_articles = [r.id for r in records if r.id not in articles.id_to_row]
    if missing_articles:
        shown = ", ".join(missing_articles[:_LIST_CAP])
        more = (
            f" (+{len(missing_articles) - _LIST_CAP} more)"
            if len(missing_articles) > _LIST_CAP
            else ""
        )
        raise JoinError(f"records without article embeddings: {shown}{more}")
    unknown: list[str] = []
    for r in records:
        for code in r.subjects:
            if code not in subjects.id_to_row or code not in catalog.by_code:
                unknown.append(f"{r.id}:{code}")
    if unknown:
        shown = ", ".join(unknown[:_LIST_CAP])
        more = f" (+{len(unknown) - _LIST_CAP} more)" if len(unknown) > _LIST_CAP else ""
        raise JoinError(f"unresolvable gold subject codes: {shown}{more}")

    examples: list[TrainingExample] = []
    skipped = 0
    for r in records:
        if not r.subjects:
            skipped += 1
            continue
        gold = sorted(set(r.subjects))
        rows = subjects.data[[subjects.id_to_row[c] for c in gold]].astype(np.float64)
        positive = gold_average(rows).astype(np.float32)
        examples.append(
            TrainingExample(
                article_row=articles.id_to_row[r.id],
                gold_codes=frozenset(gold),
                positive=positive,
                article_id=r.id,
            )
        )
    if skipped:
        log.warning("join_examples: skipped %d records with empty gold sets", skipped)
    return examples
