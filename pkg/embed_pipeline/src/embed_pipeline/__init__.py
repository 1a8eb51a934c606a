"""Ingestion pipeline: turn subject catalogs and article records into
embedding containers the alignment package consumes.

The two packages share no code, only file formats: JSON Lines on the way
in, the .nbemb byte layout on the way out.
"""

from .encoders import DEFAULT_DE_MODEL, DEFAULT_EN_MODEL, EncoderSpec, HashEncoder, load_encoder
from .errors import EncoderError, InputError, PipelineError
from .formats import read_catalog, read_records, write_container
from .pipeline import CachedTranslator, encode_articles, encode_subjects

__all__ = [
    "DEFAULT_DE_MODEL",
    "DEFAULT_EN_MODEL",
    "CachedTranslator",
    "EncoderError",
    "EncoderSpec",
    "HashEncoder",
    "InputError",
    "PipelineError",
    "encode_articles",
    "encode_subjects",
    "load_encoder",
    "read_catalog",
    "read_records",
    "write_container",
]
