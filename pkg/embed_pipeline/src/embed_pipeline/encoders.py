"""Text encoders behind one small interface.

Two families are supported:

- pretrained sentence encoders loaded by identifier (optional dependency;
  the documented defaults are one English and one German model, both
  emitting 768-dimensional vectors), and
- a dependency-free hash encoder that maps each text deterministically to
  a unit vector, used for fixtures, tests, and offline smoke runs.

Long inputs are handled by whatever truncation the underlying encoder
applies; this package does not re-tokenize.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import EncoderError

DEFAULT_EN_MODEL = "all-mpnet-base-v2"
DEFAULT_DE_MODEL = "T-Systems-onsite/german-roberta-sentence-transformer-v2"
HASH_MODEL = "hash"
EXPECTED_DIM = 768


@dataclass(frozen=True)
class EncoderSpec:
    """What the pipeline was asked to run: identifier, dim, language."""

    identifier: str
    expected_dim: int = EXPECTED_DIM
    lang: str = "en"

    def __post_init__(self):
        if not self.identifier:
            raise EncoderError("encoder identifier must be nonempty")
        if self.expected_dim < 1:
            raise EncoderError(f"expected_dim must be >= 1, got {self.expected_dim}")
        if self.lang not in ("en", "de"):
            raise EncoderError(f"lang must be 'en' or 'de', got {self.lang!r}")


class HashEncoder:
    """Deterministic offline encoder: text -> seeded unit normal vector.

    The digest of the text seeds a PCG64 stream, so equal texts map to
    equal vectors and reruns are byte-stable. Useful wherever the real
    encoder weights are unavailable or overkill.
    """

    def __init__(self, dim: int = EXPECTED_DIM):
        if dim < 1:
            raise EncoderError(f"dim must be >= 1, got {dim}")
        self.dim = dim

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
            seed = int.from_bytes(digest, "little")
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
            v = gen.standard_normal(self.dim)
            out[i] = (v / np.linalg.norm(v)).astype(np.float32)
        return out


class SentenceEncoder:
    """Adapter around a pretrained sentence-transformer model."""

    def __init__(self, identifier: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderError(
                f"encoder {identifier!r} needs the optional 'encoders' extra "
                "(pip install embed-pipeline[encoders])"
            ) from exc
        try:
            self._model = SentenceTransformer(identifier)
        except Exception as exc:
            raise EncoderError(f"could not load encoder {identifier!r}: {exc}") from exc
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str]) -> np.ndarray:
        vecs = self._model.encode(texts, convert_to_numpy=True, show_progress_bar=False)
        return np.asarray(vecs, dtype=np.float32)


def load_encoder(identifier: str):
    """Resolve an identifier to an encoder instance.

    "hash" selects the offline encoder; anything else is treated as a
    pretrained model name and requires the optional dependency.
    """
    if identifier == HASH_MODEL:
        return HashEncoder()
    return SentenceEncoder(identifier)
