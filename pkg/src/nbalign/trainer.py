"""Training loop: AdamW, per-epoch cosine annealing, per-step negatives.

One optimizer step processes a mini-batch of articles. All vectors the
step needs (anchors, and with transform_targets="both" also positives and
sampled negatives) are stacked into a single forward batch, deduplicated by
role so a subject drawn as a negative for several articles in the batch is
transformed once. Per-article hinge losses are summed, their gradients are
scattered back onto the stacked rows, and one hand-written backward pass
produces parameter gradients. Backward skips rows whose loss gradient is
exactly zero (inactive hinges), which is exact, not approximate.

Determinism: init, dropout, shuffling, and negative sampling draw from four
independent streams of a single seed, and every reduction runs in a fixed
order, so (seed, config, data) determine the resulting parameters bit for
bit.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import kernels
from .dataio import EmbeddingMatrix
from .errors import ConfigError, ContractViolation, NumericError, SamplingError
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    prime_scratch,
    tensor_names,
)
from .objective import LossHyper, TrainingExample, margin_loss, sample_negatives
from .rng import RngState


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr0: float = 1e-4
    weight_decay: float = 0.0
    T_max: int = 20
    eta_min: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossHyper = field(default_factory=LossHyper)

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not isinstance(self.T_max, int) or self.T_max < 1:
            raise ConfigError(f"T_max must be >= 1, got {self.T_max!r}")
        # lr0 == eta_min == 0 is allowed (frozen-parameter runs)
        if not self.lr0 >= self.eta_min >= 0.0:
            raise ConfigError(
                f"need lr0 >= eta_min >= 0, got lr0={self.lr0}, eta_min={self.eta_min}"
            )
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError(
                f"betas must lie in [0, 1), got {self.adam_beta1}, {self.adam_beta2}"
            )
        if self.adam_eps <= 0.0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            step=0,
            m={n: np.zeros_like(t) for n, t in params.tensors.items()},
            v={n: np.zeros_like(t) for n, t in params.tensors.items()},
        )


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    seconds: float
    examples: int

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "lr": self.lr,
            "seconds": self.seconds,
            "examples": self.examples,
        }


@dataclass
class TrainLog:
    entries: list[EpochStats]
    total_steps: int

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), separators=(",", ":")) + "\n")


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """eta_min + (lr0 - eta_min) * (1 + cos(pi * epoch / T_max)) / 2.

    Epochs beyond T_max clamp to eta_min.
    """
    if epoch < 0:
        raise ContractViolation(f"epoch must be >= 0, got {epoch}")
    if epoch >= cfg.T_max:
        return cfg.eta_min
    span = cfg.lr0 - cfg.eta_min
    return cfg.eta_min + span * (1.0 + math.cos(math.pi * epoch / cfg.T_max)) / 2.0


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update, mutating params and state."""
    if lr < 0:
        raise ContractViolation(f"lr must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in tensor_names(params.config):
        g = grads[name]
        if not np.isfinite(g).all():
            idx = np.unravel_index(int(np.flatnonzero(~np.isfinite(g))[0]), g.shape)
            raise NumericError(f"non-finite gradient for {name} at index {tuple(idx)}")
        p = params.tensors[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay != 0.0:
            p *= 1.0 - lr * cfg.weight_decay
        mhat = m / bc1
        vhat = v / bc2
        p -= (lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.dtype)


def _resolve_gold_rows(
    examples: list[TrainingExample], subjects: EmbeddingMatrix
) -> list[np.ndarray]:
    rows = []
    for ex in examples:
        missing = sorted(c for c in ex.gold_codes if c not in subjects.id_to_row)
        if missing:
            raise ContractViolation(
                f"article row {ex.article_row}: gold codes not in subjects: "
                f"{', '.join(missing[:10])}"
            )
        rows.append(
            np.asarray(sorted(subjects.id_to_row[c] for c in ex.gold_codes), dtype=np.int64)
        )
    return rows


def train(
    subjects: EmbeddingMatrix,
    articles: EmbeddingMatrix,
    examples: list[TrainingExample],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> tuple[ModelParams, TrainLog]:
    """Run the full optimization loop; returns final params and the log.

    Runs epochs x ceil(N / batch_size) optimizer steps. Negatives are
    resampled at every step; the example order is reshuffled once per
    epoch; the learning rate changes once per epoch. Base embedding
    matrices are never written to.
    """
    if not examples:
        raise ConfigError("training requires at least one example")
    if subjects.dim != model_cfg.d or articles.dim != model_cfg.d:
        raise ConfigError(
            f"embedding dims (subjects {subjects.dim}, articles {articles.dim}) "
            f"must equal model d={model_cfg.d}"
        )
    n_articles = articles.data.shape[0]
    for ex in examples:
        if not 0 <= ex.article_row < n_articles:
            raise ContractViolation(f"article_row {ex.article_row} out of range")
        if ex.positive.shape != (model_cfg.d,):
            raise ContractViolation(
                f"positive vector shape {ex.positive.shape} != ({model_cfg.d},)"
            )
    gold_rows = _resolve_gold_rows(examples, subjects)
    hyper = cfg.loss
    n_subjects = subjects.data.shape[0]
    for ex, rows in zip(examples, gold_rows):
        if n_subjects - rows.size < hyper.negatives:
            raise SamplingError(
                f"article row {ex.article_row}: {n_subjects - rows.size} non-gold "
                f"subjects < {hyper.negatives} requested negatives"
            )

    kernels.warmup()
    rng = RngState(cfg.seed)
    params = init_params(model_cfg, rng)
    state = OptimizerState.zeros(params)
    shuffle_gen = rng.stream("shuffle")
    neg_gen = rng.stream("negatives")
    scratch: dict = {}
    # worst case per step: every batch row distinct after dedup
    max_rows = min(cfg.batch_size * (2 + hyper.negatives),
                   cfg.batch_size * 2 + n_subjects)
    prime_scratch(scratch, model_cfg, max_rows)

    n = len(examples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    entries: list[EpochStats] = []
    positives = [np.ascontiguousarray(ex.positive, dtype=np.float32) for ex in examples]

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = shuffle_gen.permutation(n)
        epoch_loss = 0.0
        t0 = time.perf_counter()
        for step in range(steps_per_epoch):
            batch = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            loss = _train_step(
                params, state, lr, cfg, hyper, batch, examples, gold_rows,
                positives, subjects, articles, rng, neg_gen, scratch,
            )
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            epoch_loss += loss
        entries.append(
            EpochStats(
                epoch=epoch,
                mean_loss=epoch_loss / n,
                lr=lr,
                seconds=time.perf_counter() - t0,
                examples=n,
            )
        )
    return params, TrainLog(entries, total_steps=cfg.epochs * steps_per_epoch)


def _train_step(
    params, state, lr, cfg, hyper, batch, examples, gold_rows, positives,
    subjects, articles, rng, neg_gen, scratch,
) -> float:
    """One forward/backward/update over a batch of article indices."""
    both = hyper.transform_targets == "both"
    rows: list[np.ndarray] = []
    row_of: dict = {}

    def add(key, vec) -> int:
        j = row_of.get(key)
        if j is None:
            j = len(rows)
            row_of[key] = j
            rows.append(vec)
        return j

    # negatives are drawn in batch order, before any forward, so the
    # consumption of the negatives stream is independent of dedup layout
    plan = []
    for i in batch:
        ex = examples[int(i)]
        negs = sample_negatives(
            subjects.data.shape[0], gold_rows[int(i)], hyper.negatives, neg_gen
        )
        a_j = add(("a", ex.article_row), articles.data[ex.article_row])
        if both:
            p_j = add(("p", ex.gold_codes), positives[int(i)])
            n_js = [add(("s", int(r)), subjects.data[int(r)]) for r in negs]
        else:
            p_j = -1
            n_js = negs
        plan.append((int(i), a_j, p_j, n_js))

    stacked = np.stack(rows)
    z, trace = forward(params, stacked, mode="train", rng=rng, scratch=scratch)

    dz = np.zeros_like(z, dtype=np.float64)
    total = 0.0
    for i, a_j, p_j, n_js in plan:
        if both:
            negs_mat = z[np.asarray(n_js, dtype=np.int64)]
            loss, d_a, d_p, d_n = margin_loss(z[a_j], z[p_j], negs_mat, hyper.margin)
            dz[a_j] += d_a
            dz[p_j] += d_p
            for t_row, j in zip(d_n, n_js):
                dz[j] += t_row
        else:
            negs_mat = subjects.data[n_js]
            loss, d_a, _, _ = margin_loss(z[a_j], positives[i], negs_mat, hyper.margin)
            dz[a_j] += d_a
        total += loss

    grads, _ = backward(params, trace, dz.astype(np.float32), scratch=scratch)
    adamw_step(params, grads, state, lr, cfg)
    return total


def load_train_config(path: str | os.PathLike) -> tuple[TrainConfig, ModelConfig]:
    """Read a JSON config: flat TrainConfig keys, optional "loss" and "model" objects."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    train_keys = {f.name for f in dc_fields(TrainConfig)} - {"loss"}
    known = train_keys | {"loss", "model"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    loss_data = data.get("loss", {})
    if not isinstance(loss_data, dict):
        raise ConfigError(f"{path}: 'loss' must be an object")
    loss_keys = {f.name for f in dc_fields(LossHyper)}
    bad = set(loss_data) - loss_keys
    if bad:
        raise ConfigError(f"{path}: unknown loss keys: {sorted(bad)}")
    model_data = data.get("model", {})
    if not isinstance(model_data, dict):
        raise ConfigError(f"{path}: 'model' must be an object")
    try:
        hyper = LossHyper(**loss_data)
        tc = TrainConfig(**{k: v for k, v in data.items() if k in train_keys}, loss=hyper)
        mc = ModelConfig.from_dict(model_data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return tc, mc
