"""Encoding passes: subjects from catalog labels, articles from texts.

Subjects encode one label per catalog entry. With translate=True the
English label is used: the entry's own label_en when present, otherwise a
translator lookup. Translations are cached in a JSON side file so reruns
never pay for the same label twice.

Articles encode title + single space + abstract; when either part is
empty the separator is dropped rather than leaving stray whitespace.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .encoders import EncoderSpec
from .errors import EncoderError, InputError
from .formats import CatalogEntry, Record

log = logging.getLogger(__name__)


@dataclass
class EncodedBatch:
    ids: list[str]
    vectors: np.ndarray
    skipped: int  # entries dropped for having no text to encode


class CachedTranslator:
    """Label translations backed by a JSON side file.

    The file maps source label to translated label. A base translator
    (any callable str -> str) fills misses; without one, a miss is an
    InputError naming the label, which keeps offline runs honest instead
    of silently encoding the wrong language.
    """

    def __init__(self, cache_path, base=None):
        self.cache_path = os.fspath(cache_path)
        self.base = base
        if os.path.exists(self.cache_path):
            with open(self.cache_path, "r", encoding="utf-8") as fh:
                cached = json.load(fh)
            if not isinstance(cached, dict):
                raise InputError(f"{cache_path}: translation cache must be a JSON object")
            self.cache = dict(cached)
        else:
            self.cache = {}
        self._dirty = False

    def translate(self, label: str) -> str:
        if label in self.cache:
            return self.cache[label]
        if self.base is None:
            raise InputError(f"no cached translation for label {label!r}")
        out = self.base(label)
        self.cache[label] = out
        self._dirty = True
        return out

    def save(self) -> None:
        if not self._dirty:
            return
        with open(self.cache_path, "w", encoding="utf-8") as fh:
            json.dump(self.cache, fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")
        self._dirty = False


def _run_encoder(encoder, spec: EncoderSpec, ids, texts) -> EncodedBatch:
    vectors = np.asarray(encoder.encode(texts), dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(texts):
        raise EncoderError(
            f"encoder returned shape {vectors.shape} for {len(texts)} texts"
        )
    if vectors.shape[1] != spec.expected_dim:
        raise EncoderError(
            f"encoder dim {vectors.shape[1]} does not match expected {spec.expected_dim}"
        )
    if not np.isfinite(vectors).all():
        raise EncoderError("encoder produced non-finite values")
    return vectors, ids


def encode_subjects(
    entries: list[CatalogEntry],
    encoder,
    spec: EncoderSpec,
    translate: bool = False,
    translator: CachedTranslator | None = None,
) -> EncodedBatch:
    """One vector per catalog entry; id = subject code."""
    if not entries:
        raise InputError("catalog is empty")
    ids: list[str] = []
    texts: list[str] = []
    skipped = 0
    for entry in entries:
        if translate:
            text = entry.label_en
            if text is None:
                if translator is None:
                    raise InputError(
                        f"subject {entry.code!r} has no label_en and no translator is configured"
                    )
                text = translator.translate(entry.label)
        else:
            text = entry.label
        if not text.strip():
            skipped += 1
            continue
        ids.append(entry.code)
        texts.append(text)
    if skipped:
        log.warning("encode_subjects: skipped %d entries with empty labels", skipped)
    if not ids:
        raise InputError("every catalog entry had an empty label")
    vectors, ids = _run_encoder(encoder, spec, ids, texts)
    return EncodedBatch(ids, vectors, skipped)


def article_text(record: Record) -> str:
    """Title + single space + abstract, without stray edge whitespace."""
    return f"{record.title} {record.abstract}".strip()


def encode_articles(records: list[Record], encoder, spec: EncoderSpec) -> EncodedBatch:
    """One vector per record, in input order; id = record id."""
    if not records:
        raise InputError("records are empty")
    ids: list[str] = []
    texts: list[str] = []
    skipped = 0
    for record in records:
        text = article_text(record)
        if not text:
            skipped += 1
            continue
        ids.append(record.id)
        texts.append(text)
    if skipped:
        log.warning("encode_articles: skipped %d records with no text", skipped)
    if not ids:
        raise InputError("every record had empty title and abstract")
    vectors, ids = _run_encoder(encoder, spec, ids, texts)
    return EncodedBatch(ids, vectors, skipped)
