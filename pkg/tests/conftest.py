"""Shared builders for the test suite.

Everything here is deterministic: fixtures derive all randomness from
explicit integer seeds via numpy's PCG64 so failures replay exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.random import PCG64, Generator, SeedSequence

from nbalign.dataio import EmbeddingMatrix
from nbalign.model import ModelConfig
from nbalign.objective import TrainingExample
from nbalign.retrieval import batch_infer, build_index


def gen_for(seed: int) -> Generator:
    return Generator(PCG64(SeedSequence(seed)))


def tiny_config(**overrides) -> ModelConfig:
    """Small-width config for fast exact tests; dropout off by default."""
    base = dict(
        d=8,
        model_dim=4,
        heads=2,
        head_dim=2,
        layers=1,
        ffn_dim=8,
        mlp_hidden=6,
        dropout_p=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def cluster_fixture(
    seed: int = 0,
    d: int = 768,
    n_clusters: int = 4,
    subjects_per: int = 15,
    articles_per: int = 10,
    subject_noise: float = 0.05,
    article_noise: float = 0.1,
):
    """Separable clustered corpus: subjects and articles share unit centers.

    Returns (subjects, articles, examples, gold) where gold maps article id
    to the frozenset of same-cluster subject codes.
    """
    gen = gen_for(seed)
    centers = gen.normal(size=(n_clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    sub_ids: list[str] = []
    sub_rows: list[np.ndarray] = []
    for c in range(n_clusters):
        for j in range(subjects_per):
            sub_ids.append(f"S{c}_{j}")
            sub_rows.append(centers[c] + subject_noise * gen.normal(size=d))

    art_ids: list[str] = []
    art_rows: list[np.ndarray] = []
    gold: dict[str, frozenset[str]] = {}
    for c in range(n_clusters):
        codes = frozenset(f"S{c}_{j}" for j in range(subjects_per))
        for j in range(articles_per):
            aid = f"A{c}_{j}"
            art_ids.append(aid)
            art_rows.append(centers[c] + article_noise * gen.normal(size=d))
            gold[aid] = codes

    subjects = EmbeddingMatrix(sub_ids, np.asarray(sub_rows, dtype=np.float32))
    articles = EmbeddingMatrix(art_ids, np.asarray(art_rows, dtype=np.float32))

    examples: list[TrainingExample] = []
    for row, aid in enumerate(art_ids):
        codes = gold[aid]
        rows = sorted(subjects.id_to_row[c] for c in codes)
        positive = (
            subjects.data[rows].astype(np.float64).mean(axis=0).astype(np.float32)
        )
        examples.append(
            TrainingExample(
                article_row=row, gold_codes=codes, positive=positive, article_id=aid
            )
        )
    return subjects, articles, examples, gold


def recall_at_k(subjects, articles, gold, params, k: int = 5) -> float:
    """Mean per-article recall of the top-k retrieved codes."""
    index = build_index(subjects, params, mode="transform")
    results = batch_infer(articles, index, params, k)
    vals = [
        len(set(r.codes) & gold[r.article_id]) / len(gold[r.article_id])
        for r in results
    ]
    return float(np.mean(vals))
