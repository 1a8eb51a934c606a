"""Nearest-subject retrieval by cosine distance.

An index holds one vector per subject, either the raw base embeddings or
their transformed images. Queries are ranked by cosine distance with ties
broken by catalog position, so results are a pure function of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingMatrix
from .errors import ContractViolation, DegenerateVectorError
from .model import ModelParams, transform
from .objective import NORM_FLOOR

# rows transformed per forward call while building an index; bounds the
# size of per-row attention intermediates
_BUILD_CHUNK = 256


@dataclass
class SubjectIndex:
    codes: list[str]
    vectors: np.ndarray  # (n, d) float32
    norms: np.ndarray  # (n,) float64
    mode: str  # "transform" | "raw"


def build_index(
    subjects: EmbeddingMatrix,
    params: ModelParams | None = None,
    mode: str = "transform",
) -> SubjectIndex:
    """Precompute the searchable matrix of subject vectors.

    mode="transform" maps every subject through the trained model in eval
    mode; mode="raw" copies the base embeddings unchanged.
    """
    if mode not in ("transform", "raw"):
        raise ContractViolation(f"mode must be 'transform' or 'raw', got {mode!r}")
    if mode == "transform":
        if params is None:
            raise ContractViolation("mode='transform' requires model parameters")
        if subjects.dim != params.config.d:
            raise ContractViolation(
                f"subject dim {subjects.dim} != model d {params.config.d}"
            )
        n = subjects.data.shape[0]
        vectors = np.empty_like(subjects.data)
        scratch: dict = {}
        for lo in range(0, n, _BUILD_CHUNK):
            hi = min(lo + _BUILD_CHUNK, n)
            vectors[lo:hi] = transform(params, subjects.data[lo:hi], scratch=scratch)
    else:
        vectors = subjects.data.copy()
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        shown = ", ".join(subjects.ids[int(i)] for i in bad[:10])
        raise DegenerateVectorError(
            f"{bad.size} subject vector(s) have near-zero norm: {shown}"
        )
    return SubjectIndex(codes=list(subjects.ids), vectors=vectors, norms=norms, mode=mode)


@dataclass
class RankingResult:
    article_id: str
    codes: list[str]
    distances: list[float]  # nondecreasing, same length as codes


def query_topk(
    index: SubjectIndex,
    m: np.ndarray,
    params: ModelParams | None,
    k: int,
) -> tuple[list[str], list[float]]:
    """Rank the k nearest subjects to one article embedding.

    The query is transformed iff params is given; pass None to search with
    the raw embedding. Ties in distance resolve to the lower catalog index.
    """
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    q = np.asarray(m)
    if q.ndim != 1 or q.shape[0] != index.vectors.shape[1]:
        raise ContractViolation(
            f"query shape {q.shape} incompatible with index dim {index.vectors.shape[1]}"
        )
    if params is not None:
        q = transform(params, q.astype(np.float32))
    q64 = q.astype(np.float64)
    qn = float(np.linalg.norm(q64))
    if qn < NORM_FLOOR:
        raise DegenerateVectorError("query vector has near-zero norm")
    d = 1.0 - (index.vectors.astype(np.float64) @ q64) / (index.norms * qn)
    n = d.shape[0]
    kk = min(k, n)
    if kk < n:
        kth = np.partition(d, kk - 1)[kk - 1]
        cand = np.flatnonzero(d <= kth)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((cand, d[cand]))][:kk]
    return [index.codes[int(i)] for i in order], [float(d[int(i)]) for i in order]


def batch_infer(
    articles: EmbeddingMatrix,
    index: SubjectIndex,
    params: ModelParams | None,
    k: int,
) -> list[RankingResult]:
    """Rank subjects for every article; failures name the offending article."""
    queries = articles.data
    if params is not None:
        if articles.dim != params.config.d:
            raise ContractViolation(
                f"article dim {articles.dim} != model d {params.config.d}"
            )
        queries = np.empty_like(articles.data)
        scratch: dict = {}
        for lo in range(0, queries.shape[0], _BUILD_CHUNK):
            hi = min(lo + _BUILD_CHUNK, queries.shape[0])
            queries[lo:hi] = transform(params, articles.data[lo:hi], scratch=scratch)
    out = []
    for row, aid in enumerate(articles.ids):
        try:
            codes, dists = query_topk(index, queries[row], None, k)
        except DegenerateVectorError as exc:
            raise DegenerateVectorError(f"article {aid!r}: {exc}") from exc
        out.append(RankingResult(article_id=aid, codes=codes, distances=dists))
    return out
