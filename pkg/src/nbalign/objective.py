"""Margin-based cosine objective with exact subgradients.

The loss for one article compares its aligned anchor against one positive
(the mean of its gold subject embeddings) and k sampled negatives:

    loss = sum_i max(0, margin + dcos(a, p) - dcos(a, n_i))

Gradient formulas are derived by hand and validated against central finite
differences. All distance and gradient arithmetic runs in float64 even for
float32 inputs; callers cast the returned gradients back as needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DegenerateVectorError, SamplingError
from .rng import RngState

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossHyper:
    margin: float = 0.2
    negatives: int = 15
    transform_targets: str = "both"

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if not isinstance(self.negatives, int) or isinstance(self.negatives, bool) or self.negatives < 1:
            raise ConfigError(f"negatives must be a positive integer, got {self.negatives!r}")
        if self.transform_targets not in ("none", "both"):
            raise ConfigError(
                f"transform_targets must be 'none' or 'both', got {self.transform_targets!r}"
            )


@dataclass
class TrainingExample:
    """One trainable article: embedding row, gold subject codes, positive.

    The positive vector is the arithmetic mean of the base embeddings of
    gold_codes (built by dataio.join_examples).
    """

    article_row: int
    gold_codes: frozenset[str]
    positive: np.ndarray
    article_id: str = ""

    def __post_init__(self):
        self.gold_codes = frozenset(self.gold_codes)
        if not self.gold_codes:
            raise ContractViolation("TrainingExample requires a nonempty gold set")


def _checked_norm(v: np.ndarray, what: str) -> float:
    n = float(np.linalg.norm(v))
    if n < NORM_FLOOR:
        raise DegenerateVectorError(f"{what} has norm {n:.3e} < {NORM_FLOOR:g}")
    return n


def cosine_distance(x: np.ndarray, y: np.ndarray) -> float:
    """1 - cos(x, y), in [0, 2] up to rounding. Computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation(
            f"cosine_distance needs two equal-length vectors, got {x.shape} and {y.shape}"
        )
    nx = _checked_norm(x, "x")
    ny = _checked_norm(y, "y")
    return 1.0 - float(np.dot(x, y)) / (nx * ny)


def gold_average(rows: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Elementwise arithmetic mean of a nonempty list of equal-length vectors.

    Column sums use exactly-rounded accumulation, so the result is
    independent of the order the vectors are given in.
    """
    if len(rows) == 0:
        raise ContractViolation("gold_average of an empty list")
    mat = np.asarray(rows)
    if mat.ndim != 2:
        raise ContractViolation("gold_average inputs must be equal-length vectors")
    cols = np.asarray(mat.T, dtype=np.float64)
    acc = np.array([math.fsum(col) for col in cols], dtype=np.float64)
    return (acc / mat.shape[0]).astype(mat.dtype)


def margin_loss(
    a: np.ndarray,
    p: np.ndarray,
    negs: np.ndarray,
    margin: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Hinge loss over one anchor/positive and a stack of negatives.

    Returns (loss, d_a, d_p, d_negs) where the gradients are exact
    subgradients (0 at the hinge kink) computed in float64. negs is (k, d)
    with k >= 1.
    """
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(negs, dtype=np.float64)
    if n.ndim != 2 or n.shape[0] < 1:
        raise ContractViolation(f"negs must be a nonempty (k, d) stack, got shape {n.shape}")
    if a.shape != p.shape or a.ndim != 1 or n.shape[1] != a.shape[0]:
        raise ContractViolation(
            f"dimension mismatch: a {a.shape}, p {p.shape}, negs {n.shape}"
        )
    na = _checked_norm(a, "anchor")
    npos = _checked_norm(p, "positive")
    nn = np.linalg.norm(n, axis=1)
    bad = np.flatnonzero(nn < NORM_FLOOR)
    if bad.size:
        raise DegenerateVectorError(
            f"negatives at positions {bad.tolist()} have norm < {NORM_FLOOR:g}"
        )

    cos_ap = float(np.dot(a, p)) / (na * npos)
    d_ap = 1.0 - cos_ap
    dots = n @ a
    cos_an = dots / (nn * na)
    d_an = 1.0 - cos_an

    hinge = margin + d_ap - d_an
    act = hinge > 0.0
    loss = float(hinge[act].sum())

    d_a = np.zeros_like(a)
    d_p = np.zeros_like(p)
    d_negs = np.zeros_like(n)
    k_act = int(act.sum())
    if k_act:
        # d dcos(a,b)/da = cos*a/|a|^2 - b/(|a||b|)
        # d dcos(a,b)/db = cos*b/|b|^2 - a/(|a||b|)
        d_a += k_act * (cos_ap * a / na**2 - p / (na * npos))
        d_p += k_act * (cos_ap * p / npos**2 - a / (na * npos))
        n_act = n[act]
        nn_act = nn[act]
        cos_act = cos_an[act]
        # the -dcos(a, n_i) term flips the sign for both a and n_i
        d_a -= (cos_act.sum() * a / na**2) - (n_act / (na * nn_act[:, None])).sum(axis=0)
        d_negs[act] = -(cos_act[:, None] * n_act / nn_act[:, None] ** 2
                        - a / (na * nn_act[:, None]))
    return loss, d_a, d_p, d_negs


def sample_negatives(
    catalog_size: int,
    gold_rows,
    k: int,
    rng: RngState | np.random.Generator,
) -> np.ndarray:
    """k distinct non-gold indices drawn uniformly without replacement.

    Draws k values from the complement's index space and shifts them past
    the sorted gold rows, so the draw cost never depends on catalog size.
    Deterministic given the rng stream state.
    """
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ContractViolation(f"k must be a positive integer, got {k!r}")
    gold = np.asarray(sorted(set(int(g) for g in gold_rows)), dtype=np.int64)
    if gold.size and (gold[0] < 0 or gold[-1] >= catalog_size):
        raise ContractViolation(
            f"gold rows out of range for catalog of {catalog_size}"
        )
    avail = catalog_size - gold.size
    if avail < k:
        raise SamplingError(
            f"cannot draw {k} negatives: only {avail} non-gold subjects "
            f"in a catalog of {catalog_size}"
        )
    gen = rng.stream("negatives") if isinstance(rng, RngState) else rng
    draws = gen.choice(avail, size=k, replace=False).astype(np.int64)
    # map complement indices to catalog indices by shifting past each gold row
    for g in gold:
        draws[draws >= g] += 1
    return draws
