"""Ranking evaluation: P@k, R@k, F-beta, and the judged-pool protocol.

Two scoring modes share the same per-record arithmetic:

- quantitative: every record carries an exhaustive gold set; the report
  lists per-cutoff macro-averages and the mean of the recall column.
- judged: records carry human Y/I/N labels on a fixed-depth pool of top
  predictions; case 1 counts Y and I as relevant, case 2 only Y, and the
  recall denominator is the relevant count within the judged pool.

Averaging is macro (per-record metrics averaged over records), and each
reported F1@k is computed from the macro-averaged P@k and R@k at that
cutoff. Both conventions are choices the protocol text leaves open; they
are pinned here and in the README because they change the numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, CoverageError

_LIST_CAP = 20  # max offender ids spelled out in error messages


@dataclass
class GoldLabels:
    """Relevant subject codes per article id; every set nonempty."""

    by_id: dict[str, frozenset[str]]

    def __post_init__(self):
        for rid, codes in self.by_id.items():
            if not codes:
                raise ContractViolation(f"gold set for {rid!r} is empty")
        self.by_id = {rid: frozenset(c) for rid, c in self.by_id.items()}

    def __len__(self) -> int:
        return len(self.by_id)


@dataclass
class JudgmentSet:
    """Y/I/N labels per (record id, subject code)."""

    by_record: dict[str, dict[str, str]]

    def record_ids(self) -> list[str]:
        return list(self.by_record)

    def pool(self, record_id: str) -> dict[str, str]:
        return self.by_record[record_id]


@dataclass
class EvalReport:
    mode: str  # "quantitative" | "judged-case1" | "judged-case2"
    cutoffs: list[int]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    record_count: int
    average_recall: float | None = None
    averages: dict[str, float] | None = None  # qualitative mode: P/R/F1 column means

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "cutoffs": self.cutoffs,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "record_count": self.record_count,
        }
        if self.average_recall is not None:
            out["average_recall"] = self.average_recall
        if self.averages is not None:
            out["averages"] = self.averages
        return out

    def render_table(self) -> str:
        lines = [f"{'k':>4}  {'P@k':>8}  {'R@k':>8}  {'F1@k':>8}"]
        for k, p, r, f in zip(self.cutoffs, self.precision, self.recall, self.f1):
            lines.append(f"{k:>4}  {p:>8.4f}  {r:>8.4f}  {f:>8.4f}")
        if self.average_recall is not None:
            lines.append(f"Average Recall = {self.average_recall:.4f}")
        if self.averages is not None:
            a = self.averages
            lines.append(
                f"{'Avg':>4}  {a['precision']:>8.4f}  {a['recall']:>8.4f}  {a['f1']:>8.4f}"
            )
        return "\n".join(lines)


def pr_at_k(ranked: list[str], relevant: frozenset[str] | set[str], k: int) -> tuple[float, float]:
    """(precision, recall) at cutoff k.

    Precision always divides by k: when fewer than k predictions exist the
    missing slots count as misses. Recall divides by |relevant|.
    """
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ContractViolation(f"k must be a positive integer, got {k!r}")
    if not relevant:
        raise ContractViolation("recall is undefined for an empty relevant set")
    top = ranked[:k]
    if len(set(top)) != len(top):
        raise ContractViolation("ranked codes must be distinct")
    hits = len(set(top) & set(relevant))
    return hits / k, hits / len(relevant)


def f_beta(p: float, r: float, beta: float = 1.0) -> float:
    """(1+b^2)pr / (b^2 p + r), with 0 at the p = r = 0 singularity."""
    if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
        raise ContractViolation(f"p and r must lie in [0, 1], got p={p}, r={r}")
    if beta <= 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    if p == 0.0 and r == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * p * r / (b2 * p + r)


def _check_cutoffs(cutoffs) -> list[int]:
    ks = list(cutoffs)
    if not ks:
        raise ConfigError("cutoffs must be nonempty")
    for k in ks:
        if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 1:
            raise ConfigError(f"cutoffs must be positive integers, got {k!r}")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigError(f"cutoffs must be strictly ascending, got {ks}")
    return [int(k) for k in ks]


def eval_quantitative(
    preds: dict[str, list[str]],
    gold: GoldLabels,
    cutoffs,
) -> EvalReport:
    """Macro-averaged P/R/F1 per cutoff plus the mean of the recall column.

    preds maps article id to its ranked code list. Every gold id must have
    a prediction; predictions without gold are ignored.
    """
    ks = _check_cutoffs(cutoffs)
    missing = sorted(rid for rid in gold.by_id if rid not in preds)
    if missing:
        shown = ", ".join(missing[:_LIST_CAP])
        more = f" (+{len(missing) - _LIST_CAP} more)" if len(missing) > _LIST_CAP else ""
        raise CoverageError(f"no predictions for gold ids: {shown}{more}")
    n = len(gold.by_id)
    p_cols = np.zeros(len(ks))
    r_cols = np.zeros(len(ks))
    for rid, relevant in gold.by_id.items():
        ranked = preds[rid]
        for j, k in enumerate(ks):
            p, r = pr_at_k(ranked, relevant, k)
            p_cols[j] += p
            r_cols[j] += r
    p_avg = (p_cols / n).tolist()
    r_avg = (r_cols / n).tolist()
    f_avg = [f_beta(p, r) for p, r in zip(p_avg, r_avg)]
    return EvalReport(
        mode="quantitative",
        cutoffs=ks,
        precision=p_avg,
        recall=r_avg,
        f1=f_avg,
        record_count=n,
        average_recall=float(np.mean(r_avg)),
    )


def eval_judged(
    preds: dict[str, list[str]],
    judgments: JudgmentSet,
    case: int,
    cutoffs=(5, 10, 15, 20),
) -> EvalReport:
    """Score against human-judged pools.

    Every judged record must have predictions, and every predicted code
    inside an evaluated cutoff must carry a judgment. Records whose pool
    contains no relevant code under the chosen case are excluded from the
    averages (their recall is undefined); the returned record_count is the
    number actually averaged.
    """
    if case not in (1, 2):
        raise ConfigError(f"case must be 1 or 2, got {case!r}")
    ks = _check_cutoffs(cutoffs)
    good = {"Y", "I"} if case == 1 else {"Y"}
    missing = sorted(rid for rid in judgments.by_record if rid not in preds)
    if missing:
        shown = ", ".join(missing[:_LIST_CAP])
        more = f" (+{len(missing) - _LIST_CAP} more)" if len(missing) > _LIST_CAP else ""
        raise CoverageError(f"no predictions for judged ids: {shown}{more}")
    p_cols = np.zeros(len(ks))
    r_cols = np.zeros(len(ks))
    n = 0
    for rid, pool in judgments.by_record.items():
        ranked = preds[rid]
        unjudged = [c for c in ranked[: max(ks)] if c not in pool]
        if unjudged:
            shown = ", ".join(unjudged[:_LIST_CAP])
            raise CoverageError(
                f"record {rid!r}: unjudged codes inside cutoff {max(ks)}: {shown}"
            )
        relevant = frozenset(c for c, label in pool.items() if label in good)
        if not relevant:
            continue
        n += 1
        for j, k in enumerate(ks):
            p, r = pr_at_k(ranked, relevant, k)
            p_cols[j] += p
            r_cols[j] += r
    if n == 0:
        raise CoverageError(
            f"no judged record has a relevant code under case {case}"
        )
    p_avg = (p_cols / n).tolist()
    r_avg = (r_cols / n).tolist()
    f_avg = [f_beta(p, r) for p, r in zip(p_avg, r_avg)]
    return EvalReport(
        mode=f"judged-case{case}",
        cutoffs=ks,
        precision=p_avg,
        recall=r_avg,
        f1=f_avg,
        record_count=n,
        averages={
            "precision": float(np.mean(p_avg)),
            "recall": float(np.mean(r_avg)),
            "f1": float(np.mean(f_avg)),
        },
    )
