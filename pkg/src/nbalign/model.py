"""Embedding-to-embedding alignment model.

Each coordinate of a d-dimensional input embedding is treated as a token: a
1 -> model_dim projection lifts every scalar coordinate to a token vector,
a pre-norm transformer encoder mixes information across the d token
positions, a model_dim -> 1 projection drops back to one scalar per
coordinate, and a 3-layer MLP on the resulting d-vector produces the
aligned output. Forward and backward passes are written out by hand in
numpy so gradients are fully inspectable; a float64 run of the same code
doubles as the reference for finite-difference checking.

Dropout is inverted (survivors scaled by 1/(1-p) at train time, identity at
eval). Masks are drawn from the "dropout" stream in a fixed order: for each
layer the attention-output mask then the FFN-output mask, then the two MLP
masks. With p == 0 no draws happen at all, so a p == 0 train forward leaves
the stream untouched and matches eval bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    ContractViolation,
    CorruptionError,
    FormatError,
    NumericError,
)
from .numerics import dropout_mask, layer_norm_fwd, layer_norm_vjp, softmax_rows, softmax_vjp
from .rng import RngState

LN_EPS = 1e-5

CKPT_MAGIC = b"NBC1"
CKPT_VERSION = 1

# Rowheads per attention tile. Score gemm, softmax, and the probability
# gemms run tile by tile so the (tile, d, d) slab stays cache-resident
# between them; only the full probability store streams to memory.
ATT_TILE = 8

# Rowheads processed per attention chunk when no trace is kept; bounds the
# transient probability buffer to EVAL_CHUNK * d * d floats.
EVAL_CHUNK = 8


@dataclass(frozen=True)
class ModelConfig:
    d: int = 768
    model_dim: int = 16
    heads: int = 2
    head_dim: int = 8
    layers: int = 1
    ffn_dim: int = 64
    mlp_hidden: int = 256
    dropout_p: float = 0.03

    def __post_init__(self):
        for name in ("d", "model_dim", "heads", "head_dim", "layers", "ffn_dim", "mlp_hidden"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"ModelConfig.{name} must be a positive integer, got {v!r}")
        if self.heads * self.head_dim != self.model_dim:
            raise ConfigError(
                f"heads * head_dim must equal model_dim: "
                f"{self.heads} * {self.head_dim} != {self.model_dim}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "d": self.d,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "layers": self.layers,
            "ffn_dim": self.ffn_dim,
            "mlp_hidden": self.mlp_hidden,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        expected = set(cls().to_dict())
        unknown = set(data) - expected
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**data)


def tensor_names(config: ModelConfig) -> list[str]:
    """Canonical tensor order; fixes checkpoint layout and init draws."""
    names = ["w_in", "b_in"]
    for layer in range(config.layers):
        p = f"layer{layer}."
        names += [
            p + "ln1_g", p + "ln1_b",
            p + "wq", p + "bq", p + "wk", p + "bk", p + "wv", p + "bv",
            p + "wo", p + "bo",
            p + "ln2_g", p + "ln2_b",
            p + "ffn_w1", p + "ffn_b1", p + "ffn_w2", p + "ffn_b2",
        ]
    names += ["w_out", "b_out", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mlp_w3", "mlp_b3"]
    return names


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    md, f, h = config.model_dim, config.ffn_dim, config.mlp_hidden
    d = config.d
    shapes: dict[str, tuple[int, ...]] = {"w_in": (md, 1), "b_in": (md,)}
    for layer in range(config.layers):
        p = f"layer{layer}."
        shapes.update({
            p + "ln1_g": (md,), p + "ln1_b": (md,),
            p + "wq": (md, md), p + "bq": (md,),
            p + "wk": (md, md), p + "bk": (md,),
            p + "wv": (md, md), p + "bv": (md,),
            p + "wo": (md, md), p + "bo": (md,),
            p + "ln2_g": (md,), p + "ln2_b": (md,),
            p + "ffn_w1": (md, f), p + "ffn_b1": (f,),
            p + "ffn_w2": (f, md), p + "ffn_b2": (md,),
        })
    shapes.update({
        "w_out": (1, md), "b_out": (1,),
        "mlp_w1": (d, h), "mlp_b1": (h,),
        "mlp_w2": (h, h), "mlp_b2": (h,),
        "mlp_w3": (h, d), "mlp_b3": (d,),
    })
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["w_in"].dtype

    def total_parameters(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {name: t.astype(dtype) for name, t in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: t.copy() for n, t in self.tensors.items()})


def init_params(config: ModelConfig, rng: RngState) -> ModelParams:
    """Xavier-uniform weight matrices, zero biases, unit layer-norm gains.

    Matrices draw from the "init" stream in canonical tensor order with
    bound a = sqrt(6 / (fan_in + fan_out)); vectors consume no randomness.
    """
    gen = rng.stream("init")
    tensors: dict[str, np.ndarray] = {}
    shapes = tensor_shapes(config)
    for name in tensor_names(config):
        shape = shapes[name]
        if len(shape) == 2:
            fan_in, fan_out = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = gen.uniform(-a, a, size=shape).astype(np.float32)
        elif name.endswith(("ln1_g", "ln2_g")):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return ModelParams(config, tensors)


@dataclass
class ForwardTrace:
    """Intermediates captured by a train-mode forward, consumed by backward."""

    params_id: int
    n_rows: int
    single: bool
    fast: bool
    m: np.ndarray
    x_in: list[np.ndarray] = field(default_factory=list)
    xhat1: list[np.ndarray] = field(default_factory=list)
    inv1: list[np.ndarray] = field(default_factory=list)
    qs: list[np.ndarray] = field(default_factory=list)
    kt: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)
    cat: list[np.ndarray] = field(default_factory=list)
    attn_mask: list[np.ndarray | None] = field(default_factory=list)
    xhat2: list[np.ndarray] = field(default_factory=list)
    inv2: list[np.ndarray] = field(default_factory=list)
    ffn_relu: list[np.ndarray] = field(default_factory=list)
    ffn_mask: list[np.ndarray | None] = field(default_factory=list)
    x_final: np.ndarray | None = None
    x_attn: np.ndarray | None = None
    h1: np.ndarray | None = None
    mask1: np.ndarray | None = None
    h2: np.ndarray | None = None
    mask2: np.ndarray | None = None


def _scratch_buf(scratch: dict | None, key: str, shape, dtype) -> np.ndarray:
    """Reusable buffer from the caller's scratch dict (or a fresh array).

    Storage is a flat array per key that only ever grows, so a training
    loop whose batch row count varies step to step keeps touching the same
    pages instead of reallocating its largest buffers.
    """
    size = 1
    for s in shape:
        size *= int(s)
    if scratch is None:
        return np.empty(shape, dtype=dtype)
    buf = scratch.get(key)
    if buf is None or buf.size < size or buf.dtype != dtype:
        buf = np.empty(size, dtype=dtype)
        scratch[key] = buf
    return buf[:size].reshape(shape)


def prime_scratch(scratch: dict, config: ModelConfig, max_rows: int) -> None:
    """Pre-fault the large per-step buffers for up to max_rows input rows.

    A training loop's first steps otherwise pay the page-fault cost of the
    probability stores (and pay it again whenever a step arrives with more
    rows than any before it); touching the memory once up front keeps every
    timed step uniform.
    """
    nh = max_rows * config.heads
    for layer in range(config.layers):
        buf = _scratch_buf(scratch, f"f.probs{layer}", (nh, config.d, config.d), np.float32)
        buf.fill(0.0)


def _use_fast(dtype: np.dtype, fast: bool | None) -> bool:
    if fast is None:
        return dtype == np.float32
    if fast and dtype != np.float32:
        raise ContractViolation("fast kernels support float32 only")
    return fast


def forward(
    params: ModelParams,
    m: np.ndarray,
    mode: str = "eval",
    rng: RngState | None = None,
    *,
    fast: bool | None = None,
    scratch: dict | None = None,
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Apply the alignment transform to one vector or a batch of rows.

    mode "train" keeps per-stage intermediates and returns them as a trace
    (and requires rng when dropout_p > 0); mode "eval" returns (z, None).
    Rows are processed independently: batching never changes values. The
    optional scratch dict lets a caller reuse the large attention buffers
    across calls; entries are only valid until the next forward/backward
    call that receives the same dict.
    """
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    m = np.asarray(m)
    single = m.ndim == 1
    m2 = m[None, :] if single else m
    if m2.ndim != 2 or m2.shape[1] != cfg.d:
        raise ContractViolation(
            f"input must have {cfg.d} coordinates per row, got shape {m.shape}"
        )
    dtype = params.dtype
    if m2.dtype != dtype:
        m2 = m2.astype(dtype)
    train = mode == "train"
    drop_p = cfg.dropout_p if train else 0.0
    if train and drop_p > 0.0 and rng is None:
        raise ContractViolation("train-mode forward with dropout_p > 0 requires rng")
    use_fast = _use_fast(dtype, fast)
    gen = rng.stream("dropout") if (train and drop_p > 0.0) else None

    t = params.tensors
    n = m2.shape[0]
    d, md, h, hd = cfg.d, cfg.model_dim, cfg.heads, cfg.head_dim
    inv_sqrt = np.asarray(1.0 / math.sqrt(hd), dtype=dtype)

    trace = ForwardTrace(
        params_id=id(params), n_rows=n, single=single, fast=use_fast, m=m2
    ) if train else None

    x = _scratch_buf(scratch, "f.x0", (n, d, md), dtype)
    np.multiply(m2[:, :, None], t["w_in"][:, 0], out=x)
    x += t["b_in"]

    for layer in range(cfg.layers):
        p = f"layer{layer}."
        y1, xhat1, iv1 = layer_norm_fwd(x, t[p + "ln1_g"], t[p + "ln1_b"], LN_EPS)
        # one flat sgemm per projection instead of n strided small ones
        y1f = y1.reshape(-1, md)
        q = _scratch_buf(scratch, "f.q", (n, d, md), dtype)
        k = _scratch_buf(scratch, "f.k", (n, d, md), dtype)
        v = _scratch_buf(scratch, "f.v", (n, d, md), dtype)
        np.matmul(y1f, t[p + "wq"], out=q.reshape(-1, md))
        q += t[p + "bq"]
        np.matmul(y1f, t[p + "wk"], out=k.reshape(-1, md))
        k += t[p + "bk"]
        np.matmul(y1f, t[p + "wv"], out=v.reshape(-1, md))
        v += t[p + "bv"]
        qs = _scratch_buf(scratch, f"f.qs{layer}", (n * h, d, hd), dtype)
        np.multiply(
            q.reshape(n, d, h, hd).transpose(0, 2, 1, 3), inv_sqrt,
            out=qs.reshape(n, h, d, hd),
        )
        kt = _scratch_buf(scratch, f"f.kt{layer}", (n * h, hd, d), dtype)
        np.copyto(kt.reshape(n, h, hd, d), k.reshape(n, d, h, hd).transpose(0, 2, 3, 1))
        vh = _scratch_buf(scratch, f"f.vh{layer}", (n * h, d, hd), dtype)
        np.copyto(vh.reshape(n, h, d, hd), v.reshape(n, d, h, hd).transpose(0, 2, 1, 3))
        b_total = n * h
        ctx = _scratch_buf(scratch, "f.ctx", (b_total, d, hd), dtype)
        if train:
            probs = _scratch_buf(scratch, f"f.probs{layer}", (b_total, d, d), dtype)
            if use_fast:
                for t0 in range(0, b_total, ATT_TILE):
                    t1 = min(t0 + ATT_TILE, b_total)
                    pt = probs[t0:t1]
                    np.matmul(qs[t0:t1], kt[t0:t1], out=pt)
                    kernels.softmax_inplace(pt)
                    np.matmul(pt, vh[t0:t1], out=ctx[t0:t1])
            else:
                np.matmul(qs, kt, out=probs)
                probs[:] = softmax_rows(probs)
                np.matmul(probs, vh, out=ctx)
        else:
            pbuf = _scratch_buf(scratch, "f.probs_eval", (min(EVAL_CHUNK, b_total), d, d), dtype)
            for b0 in range(0, b_total, EVAL_CHUNK):
                b1 = min(b0 + EVAL_CHUNK, b_total)
                chunk = pbuf[: b1 - b0]
                np.matmul(qs[b0:b1], kt[b0:b1], out=chunk)
                if use_fast:
                    kernels.softmax_inplace(chunk)
                else:
                    chunk[:] = softmax_rows(chunk)
                np.matmul(chunk, vh[b0:b1], out=ctx[b0:b1])
            probs = None
        cat = _scratch_buf(scratch, f"f.cat{layer}", (n, d, md), dtype)
        np.copyto(cat.reshape(n, d, h, hd), ctx.reshape(n, h, d, hd).transpose(0, 2, 1, 3))
        attn_out = q  # q is dead past the head split; reuse its buffer
        np.matmul(cat.reshape(-1, md), t[p + "wo"], out=attn_out.reshape(-1, md))
        attn_out += t[p + "bo"]
        amask = None
        if gen is not None:
            amask = dropout_mask(attn_out.shape, drop_p, gen, dtype)
            attn_out *= amask
        x_mid = k  # likewise dead
        np.add(x, attn_out, out=x_mid)
        y2, xhat2, iv2 = layer_norm_fwd(x_mid, t[p + "ln2_g"], t[p + "ln2_b"], LN_EPS)
        fr = _scratch_buf(scratch, f"f.fr{layer}", (n, d, cfg.ffn_dim), dtype)
        frf = fr.reshape(-1, cfg.ffn_dim)
        np.matmul(y2.reshape(-1, md), t[p + "ffn_w1"], out=frf)
        fr += t[p + "ffn_b1"]
        np.maximum(fr, 0, out=fr)
        f2 = _scratch_buf(scratch, f"f.f2{layer}", (n, d, md), dtype)
        np.matmul(frf, t[p + "ffn_w2"], out=f2.reshape(-1, md))
        f2 += t[p + "ffn_b2"]
        fmask = None
        if gen is not None:
            fmask = dropout_mask(f2.shape, drop_p, gen, dtype)
            f2 *= fmask
        np.add(x_mid, f2, out=f2)
        x_next = f2
        if trace is not None:
            trace.x_in.append(x)
            trace.xhat1.append(xhat1)
            trace.inv1.append(iv1)
            trace.qs.append(qs)
            trace.kt.append(kt)
            trace.v.append(vh)
            trace.probs.append(probs)
            trace.cat.append(cat)
            trace.attn_mask.append(amask)
            trace.xhat2.append(xhat2)
            trace.inv2.append(iv2)
            trace.ffn_relu.append(fr)
            trace.ffn_mask.append(fmask)
        x = x_next

    x_attn = _scratch_buf(scratch, "f.xa", (n, d), dtype)
    np.matmul(x.reshape(-1, md), t["w_out"][0], out=x_attn.reshape(-1))
    x_attn += t["b_out"][0]

    t1 = x_attn @ t["mlp_w1"] + t["mlp_b1"]
    mask1 = None
    if gen is not None:
        mask1 = dropout_mask(t1.shape, drop_p, gen, dtype)
        t1 = t1 * mask1
    h1 = np.maximum(t1, 0)
    t2 = h1 @ t["mlp_w2"] + t["mlp_b2"]
    mask2 = None
    if gen is not None:
        mask2 = dropout_mask(t2.shape, drop_p, gen, dtype)
        t2 = t2 * mask2
    h2 = np.maximum(t2, 0)
    z = h2 @ t["mlp_w3"] + t["mlp_b3"]

    if not np.isfinite(z).all():
        raise NumericError("non-finite activation in transform output")

    if trace is not None:
        trace.x_final = x
        trace.x_attn = x_attn
        trace.h1 = h1
        trace.mask1 = mask1
        trace.h2 = h2
        trace.mask2 = mask2

    return (z[0] if single else z), trace


def transform(
    params: ModelParams,
    m: np.ndarray,
    *,
    fast: bool | None = None,
    scratch: dict | None = None,
) -> np.ndarray:
    """Eval-mode forward returning only the aligned vectors."""
    z, _ = forward(params, m, mode="eval", fast=fast, scratch=scratch)
    return z


def _take_rows(arrs: list[np.ndarray | None], idx: np.ndarray) -> list[np.ndarray | None]:
    return [None if a is None else np.take(a, idx, axis=0) for a in arrs]


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    dz: np.ndarray,
    *,
    scratch: dict | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of sum(dz * forward(m)) w.r.t. every tensor and the input.

    dz must match the forward output shape. Rows whose dz is entirely zero
    contribute nothing and are skipped outright; this is exact because the
    backward map is linear in dz for a fixed trace.
    """
    if trace.params_id != id(params):
        raise ContractViolation("trace was produced by different params")
    cfg = params.config
    t = params.tensors
    dtype = params.dtype
    dz = np.asarray(dz)
    dz2 = dz[None, :] if trace.single else dz
    if dz2.shape != (trace.n_rows, cfg.d):
        raise ContractViolation(
            f"dz shape {dz.shape} does not match forward output "
            f"({trace.n_rows}, {cfg.d})"
        )
    if dz2.dtype != dtype:
        dz2 = dz2.astype(dtype)

    d, md, h, hd = cfg.d, cfg.model_dim, cfg.heads, cfg.head_dim
    inv_sqrt = np.asarray(1.0 / math.sqrt(hd), dtype=dtype)
    shapes = tensor_shapes(cfg)
    grads = {name: np.zeros(shapes[name], dtype=dtype) for name in tensor_names(cfg)}
    dm_full = np.zeros((trace.n_rows, cfg.d), dtype=dtype)

    active = np.flatnonzero(np.any(dz2 != 0, axis=1))
    if active.size == 0:
        return grads, (dm_full[0] if trace.single else dm_full)

    full = active.size == trace.n_rows
    if full:
        rh_idx = np.arange(trace.n_rows * h, dtype=np.int64)
        take = lambda a: a
        take_rh = lambda a: a
    else:
        rh_idx = (active[:, None] * h + np.arange(h)).ravel()
        take = lambda a: None if a is None else np.take(a, active, axis=0)
        take_rh = lambda a: None if a is None else np.take(a, rh_idx, axis=0)
        dz2 = np.take(dz2, active, axis=0)

    n = active.size
    nh = n * h

    # MLP backward: z = h2 @ w3 + b3, h2 = relu(mask2*(h1 @ w2 + b2)), ...
    h1 = take(trace.h1)
    h2 = take(trace.h2)
    x_attn = take(trace.x_attn)
    np.matmul(h2.T, dz2, out=grads["mlp_w3"])
    dz2.sum(axis=0, out=grads["mlp_b3"])
    dt2 = (dz2 @ t["mlp_w3"].T) * (h2 > 0)
    mask2 = take(trace.mask2)
    if mask2 is not None:
        dt2 *= mask2
    np.matmul(h1.T, dt2, out=grads["mlp_w2"])
    dt2.sum(axis=0, out=grads["mlp_b2"])
    dt1 = (dt2 @ t["mlp_w2"].T) * (h1 > 0)
    mask1 = take(trace.mask1)
    if mask1 is not None:
        dt1 *= mask1
    np.matmul(x_attn.T, dt1, out=grads["mlp_w1"])
    dt1.sum(axis=0, out=grads["mlp_b1"])
    dx_attn = dt1 @ t["mlp_w1"].T  # (n, d)

    # scalar re-projection: x_attn = x_final @ w_out[0] + b_out[0]
    x_final = take(trace.x_final)
    np.matmul(dx_attn.reshape(1, -1), x_final.reshape(-1, md), out=grads["w_out"])
    grads["b_out"][:] = dx_attn.sum()
    dx = _scratch_buf(scratch, "b.dx", (n, d, md), dtype)
    np.multiply(dx_attn[:, :, None], t["w_out"][0], out=dx)

    for layer in reversed(range(cfg.layers)):
        p = f"layer{layer}."
        fr = take(trace.ffn_relu[layer])
        fmask = take(trace.ffn_mask[layer])
        xhat2 = take(trace.xhat2[layer])
        iv2 = take(trace.inv2[layer])
        # x_next = x_mid + fmask * (relu(y2 @ w1 + b1) @ w2 + b2)
        if fmask is not None:
            dffn = _scratch_buf(scratch, "b.dffn", (n, d, md), dtype)
            np.multiply(dx, fmask, out=dffn)
        else:
            dffn = dx
        d2 = dffn.reshape(-1, md)
        frf = fr.reshape(-1, cfg.ffn_dim)
        np.matmul(frf.T, d2, out=grads[p + "ffn_w2"])
        d2.sum(axis=0, out=grads[p + "ffn_b2"])
        df1 = _scratch_buf(scratch, "b.df1", (n, d, cfg.ffn_dim), dtype)
        np.matmul(d2, t[p + "ffn_w2"].T, out=df1.reshape(-1, cfg.ffn_dim))
        np.multiply(df1, fr > 0, out=df1)
        y2 = _scratch_buf(scratch, "b.y2", (n, d, md), dtype)
        np.multiply(t[p + "ln2_g"], xhat2, out=y2)
        y2 += t[p + "ln2_b"]
        df1f = df1.reshape(-1, cfg.ffn_dim)
        np.matmul(y2.reshape(-1, md).T, df1f, out=grads[p + "ffn_w1"])
        df1f.sum(axis=0, out=grads[p + "ffn_b1"])
        dy2 = _scratch_buf(scratch, "b.dy2", (n, d, md), dtype)
        np.matmul(df1f, t[p + "ffn_w1"].T, out=dy2.reshape(-1, md))
        dx_ln2, dg2, db2 = layer_norm_vjp(dy2, xhat2, iv2, t[p + "ln2_g"])
        grads[p + "ln2_g"][:] = dg2
        grads[p + "ln2_b"][:] = db2
        np.add(dx, dx_ln2, out=dx)  # gradient w.r.t. x_mid

        # x_mid = x_in + amask * (merge(probs @ v) @ wo + bo)
        amask = take(trace.attn_mask[layer])
        cat = take(trace.cat[layer])
        qs = take_rh(trace.qs[layer])
        kt = take_rh(trace.kt[layer])
        vh = take_rh(trace.v[layer])
        if amask is not None:
            datt = _scratch_buf(scratch, "b.datt", (n, d, md), dtype)
            np.multiply(dx, amask, out=datt)
        else:
            datt = dx
        da2 = datt.reshape(-1, md)
        np.matmul(cat.reshape(-1, md).T, da2, out=grads[p + "wo"])
        da2.sum(axis=0, out=grads[p + "bo"])
        dcat = _scratch_buf(scratch, "b.dcat", (n, d, md), dtype)
        np.matmul(da2, t[p + "wo"].T, out=dcat.reshape(-1, md))
        dctx = _scratch_buf(scratch, "b.dctx", (nh, d, hd), dtype)
        np.copyto(dctx.reshape(n, h, d, hd), dcat.reshape(n, d, h, hd).transpose(0, 2, 1, 3))
        dvh = _scratch_buf(scratch, "b.dvh", (nh, d, hd), dtype)
        dqs = _scratch_buf(scratch, "b.dqs", (nh, d, hd), dtype)
        dkh = _scratch_buf(scratch, "b.dkh", (nh, d, hd), dtype)
        kh = kt.transpose(0, 2, 1)
        if trace.fast:
            # tile the score gradient so each (tile, d, d) slab stays
            # cache-resident across its vjp and the three gemms, and index
            # into the full probability store instead of gathering slabs
            probs_full = trace.probs[layer]
            dp_t = _scratch_buf(scratch, "b.dpt", (min(ATT_TILE, nh), d, d), dtype)
            for t0 in range(0, nh, ATT_TILE):
                t1 = min(t0 + ATT_TILE, nh)
                sl = slice(t0, t1)
                tile = dp_t[: t1 - t0]
                np.matmul(dctx[sl], vh[sl].transpose(0, 2, 1), out=tile)
                kernels.softmax_vjp_inplace(probs_full, rh_idx[sl], tile)
                for r in range(t0, t1):
                    np.matmul(probs_full[rh_idx[r]].T, dctx[r], out=dvh[r])
                np.matmul(tile, kh[sl], out=dqs[sl])
                np.matmul(tile.transpose(0, 2, 1), qs[sl], out=dkh[sl])
        else:
            probs = take_rh(trace.probs[layer])
            np.matmul(probs.transpose(0, 2, 1), dctx, out=dvh)
            dp = dctx @ vh.transpose(0, 2, 1)
            ds = softmax_vjp(probs, dp)
            np.matmul(ds, kh, out=dqs)
            np.matmul(ds.transpose(0, 2, 1), qs, out=dkh)
        dqs *= inv_sqrt
        dq = _scratch_buf(scratch, "b.dq", (n, d, md), dtype)
        np.copyto(dq.reshape(n, d, h, hd), dqs.reshape(n, h, d, hd).transpose(0, 2, 1, 3))
        dk = _scratch_buf(scratch, "b.dk", (n, d, md), dtype)
        np.copyto(dk.reshape(n, d, h, hd), dkh.reshape(n, h, d, hd).transpose(0, 2, 1, 3))
        dv = _scratch_buf(scratch, "b.dv", (n, d, md), dtype)
        np.copyto(dv.reshape(n, d, h, hd), dvh.reshape(n, h, d, hd).transpose(0, 2, 1, 3))
        xhat1 = take(trace.xhat1[layer])
        iv1 = take(trace.inv1[layer])
        y1 = _scratch_buf(scratch, "b.y1", (n, d, md), dtype)
        np.multiply(t[p + "ln1_g"], xhat1, out=y1)
        y1 += t[p + "ln1_b"]
        y12 = y1.reshape(-1, md)
        dqf = dq.reshape(-1, md)
        dkf = dk.reshape(-1, md)
        dvf = dv.reshape(-1, md)
        np.matmul(y12.T, dqf, out=grads[p + "wq"])
        dqf.sum(axis=0, out=grads[p + "bq"])
        np.matmul(y12.T, dkf, out=grads[p + "wk"])
        dkf.sum(axis=0, out=grads[p + "bk"])
        np.matmul(y12.T, dvf, out=grads[p + "wv"])
        dvf.sum(axis=0, out=grads[p + "bv"])
        dy1 = _scratch_buf(scratch, "b.dy1", (n, d, md), dtype)
        tmp = _scratch_buf(scratch, "b.tmp", (n, d, md), dtype)
        np.matmul(dqf, t[p + "wq"].T, out=dy1.reshape(-1, md))
        np.matmul(dkf, t[p + "wk"].T, out=tmp.reshape(-1, md))
        dy1 += tmp
        np.matmul(dvf, t[p + "wv"].T, out=tmp.reshape(-1, md))
        dy1 += tmp
        dx_ln1, dg1, db1 = layer_norm_vjp(dy1, xhat1, iv1, t[p + "ln1_g"])
        grads[p + "ln1_g"][:] = dg1
        grads[p + "ln1_b"][:] = db1
        np.add(dx, dx_ln1, out=dx)  # gradient w.r.t. x_in

    m2 = take(trace.m)
    dx2 = dx.reshape(-1, md)
    np.matmul(dx2.T, m2.reshape(-1, 1), out=grads["w_in"])
    dx2.sum(axis=0, out=grads["b_in"])
    dm = dx @ t["w_in"][:, 0]  # (n, d)
    if full:
        dm_full[:] = dm
    else:
        dm_full[active] = dm
    return grads, (dm_full[0] if trace.single else dm_full)


# ---------------------------------------------------------------------------
# checkpoint serialization (.nbckpt)
# ---------------------------------------------------------------------------


def save_checkpoint(
    params: ModelParams,
    cfg: ModelConfig,
    path: str | os.PathLike,
    transform_targets: str = "both",
) -> None:
    """Write params to a .nbckpt file.

    Layout: magic "NBC1", u32 LE format version, u32 LE header length, a
    UTF-8 JSON header {config, transform_targets, manifest}, then raw
    float32 LE tensor blobs in canonical order. Manifest byte offsets are
    relative to the end of the header. Identical params serialize to
    identical bytes. transform_targets records whether subject vectors were
    transformed during training so inference can match.
    """
    if cfg != params.config:
        raise ContractViolation("cfg does not match params.config")
    if transform_targets not in ("none", "both"):
        raise ContractViolation(
            f"transform_targets must be 'none' or 'both', got {transform_targets!r}"
        )
    if params.dtype != np.float32:
        raise ContractViolation(f"checkpoints store float32 tensors, got {params.dtype}")
    names = tensor_names(params.config)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        blob = arr.tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "byte_offset": offset,
            "byte_len": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": params.config.to_dict(),
        "transform_targets": transform_targets,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.uint32(CKPT_VERSION).astype("<u4").tobytes())
        fh.write(np.uint32(len(header_bytes)).astype("<u4").tobytes())
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, ModelConfig]:
    """Read a .nbckpt file back into (params, config); validates layout.

    The transform_targets flag stored alongside is exposed separately via
    :func:`checkpoint_transform_targets`.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short to be a checkpoint")
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header_len = int(np.frombuffer(raw, dtype="<u4", count=1, offset=8)[0])
    if 12 + header_len > len(raw):
        raise CorruptionError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from exc
    for key in ("config", "transform_targets", "manifest"):
        if key not in header:
            raise CorruptionError(f"{path}: header missing {key!r}")
    config = ModelConfig.from_dict(header["config"])
    transform_targets = header["transform_targets"]
    if transform_targets not in ("none", "both"):
        raise CorruptionError(
            f"{path}: bad transform_targets {transform_targets!r}"
        )
    manifest = header["manifest"]
    expected_names = tensor_names(config)
    got_names = [entry.get("name") for entry in manifest]
    if got_names != expected_names:
        raise CorruptionError(
            f"{path}: manifest names do not match config "
            f"(got {len(got_names)} tensors, expected {len(expected_names)})"
        )
    shapes = tensor_shapes(config)
    payload = raw[12 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if shape != shapes[name]:
            raise CorruptionError(
                f"{path}: tensor {name} has shape {shape}, expected {shapes[name]}"
            )
        nbytes = int(np.prod(shape)) * 4
        if entry["byte_len"] != nbytes or entry["byte_offset"] != expected_offset:
            raise CorruptionError(f"{path}: manifest entry {name} offsets inconsistent")
        if expected_offset + nbytes > len(payload):
            raise CorruptionError(f"{path}: payload truncated at tensor {name}")
        arr = np.frombuffer(
            payload, dtype="<f4", count=int(np.prod(shape)), offset=expected_offset
        ).reshape(shape)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise CorruptionError(f"{path}: tensor {name} has non-finite entries")
        tensors[name] = arr
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CorruptionError(
            f"{path}: {len(payload) - expected_offset} trailing payload bytes"
        )
    return ModelParams(config, tensors), config


def checkpoint_transform_targets(path: str | os.PathLike) -> str:
    """The transform_targets flag recorded in a checkpoint header."""
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    header_len = int(np.frombuffer(head, dtype="<u4", count=1, offset=8)[0])
    with open(path, "rb") as fh:
        fh.seek(12)
        blob = fh.read(header_len)
    if len(blob) != header_len:
        raise CorruptionError(f"{path}: header extends past end of file")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from exc
    tt = header.get("transform_targets")
    if tt not in ("none", "both"):
        raise CorruptionError(f"{path}: bad transform_targets {tt!r}")
    return tt
