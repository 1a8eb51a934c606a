"""Alignment network: init, forward oracle, gradients, checkpoints."""

import json
import math

import numpy as np
import pytest

from nbalign.errors import ContractViolation, CorruptionError, FormatError, NumericError
from nbalign.model import (
    ModelConfig,
    backward,
    checkpoint_transform_targets,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tensor_names,
    tensor_shapes,
    transform,
)
from nbalign.rng import RngState

from _gradcheck import TINY_CONFIGS, check_gradients, make_instance, pipeline_grads
from conftest import gen_for, tiny_config

DEFAULTS = ModelConfig()


def randomized_params(cfg: ModelConfig, seed: int, dtype=np.float32):
    """Init params, then overwrite every vector tensor with small noise.

    Xavier init zeroes all biases; tests that must exercise bias handling
    need them nonzero.
    """
    params = init_params(cfg, RngState(seed))
    gen = gen_for(10_000 + seed)
    for name, t in params.tensors.items():
        if t.ndim == 1:
            params.tensors[name] = gen.uniform(-0.3, 0.3, size=t.shape).astype(
                np.float32
            )
    return params.astype(dtype)


# ---------------------------------------------------------------------------
# independent straight-line re-implementation used as the forward oracle
# ---------------------------------------------------------------------------


def _ln_rows(x, gain, bias, eps=1e-5):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = gain * (row - mu) / math.sqrt(var + eps) + bias
    return out


def _softmax_rows(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.exp(x[i] - x[i].max())
        out[i] = e / e.sum()
    return out


def straight_line_forward(t, cfg, m):
    """Naive float64 per-row evaluation of the whole transform."""
    d, md, h, hd = cfg.d, cfg.model_dim, cfg.heads, cfg.head_dim
    x = np.empty((d, md))
    for i in range(d):
        x[i] = m[i] * t["w_in"][:, 0] + t["b_in"]
    for layer in range(cfg.layers):
        p = f"layer{layer}."
        y1 = _ln_rows(x, t[p + "ln1_g"], t[p + "ln1_b"])
        q = y1 @ t[p + "wq"] + t[p + "bq"]
        k = y1 @ t[p + "wk"] + t[p + "bk"]
        v = y1 @ t[p + "wv"] + t[p + "bv"]
        head_outs = []
        for hh in range(h):
            sl = slice(hh * hd, (hh + 1) * hd)
            scores = (q[:, sl] @ k[:, sl].T) / math.sqrt(hd)
            head_outs.append(_softmax_rows(scores) @ v[:, sl])
        cat = np.concatenate(head_outs, axis=1)
        x_mid = x + cat @ t[p + "wo"] + t[p + "bo"]
        y2 = _ln_rows(x_mid, t[p + "ln2_g"], t[p + "ln2_b"])
        f1 = np.maximum(y2 @ t[p + "ffn_w1"] + t[p + "ffn_b1"], 0.0)
        x = x_mid + f1 @ t[p + "ffn_w2"] + t[p + "ffn_b2"]
    x_attn = x @ t["w_out"][0] + t["b_out"][0]
    h1 = np.maximum(x_attn @ t["mlp_w1"] + t["mlp_b1"], 0.0)
    h2 = np.maximum(h1 @ t["mlp_w2"] + t["mlp_b2"], 0.0)
    return h2 @ t["mlp_w3"] + t["mlp_b3"]


class TestInit:
    def test_deterministic(self):
        a = init_params(DEFAULTS, RngState(7))
        b = init_params(DEFAULTS, RngState(7))
        for name in tensor_names(DEFAULTS):
            assert np.array_equal(a.tensors[name], b.tensors[name])

    def test_layer_norm_gains_are_one(self):
        params = init_params(tiny_config(layers=2), RngState(1))
        for name, t in params.tensors.items():
            if name.endswith(("ln1_g", "ln2_g")):
                assert np.all(t == 1.0)
            elif t.ndim == 1:
                assert np.all(t == 0.0)

    def test_weight_bound(self):
        params = init_params(DEFAULTS, RngState(2))
        for name, t in params.tensors.items():
            if t.ndim == 2:
                fan_in, fan_out = t.shape
                a = math.sqrt(6.0 / (fan_in + fan_out))
                assert np.abs(t).max() <= a

    def test_parameter_count_closed_form(self):
        cfg = DEFAULTS
        d, md, f, mh = cfg.d, cfg.model_dim, cfg.ffn_dim, cfg.mlp_hidden
        per_layer = (
            2 * (md + md)  # two layer norms, gain + bias
            + 4 * (md * md + md)  # q, k, v, o projections
            + (md * f + f)
            + (f * md + md)
        )
        closed = (
            (md + md)  # scalar-to-token projection
            + cfg.layers * per_layer
            + (md + 1)  # token-to-scalar projection
            + (d * mh + mh)
            + (mh * mh + mh)
            + (mh * d + d)
        )
        params = init_params(cfg, RngState(0))
        assert params.total_parameters() == closed == 463361

    def test_config_validation(self):
        with pytest.raises(Exception):
            ModelConfig(d=8, model_dim=5, heads=2, head_dim=2)


class TestForward:
    def test_output_length_default_config(self):
        params = init_params(DEFAULTS, RngState(0))
        z, trace = forward(params, np.ones(768, dtype=np.float32), mode="eval")
        assert z.shape == (768,)
        assert trace is None

    def test_eval_deterministic(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 3)
        m = gen_for(90).normal(size=cfg.d).astype(np.float32)
        z1, _ = forward(params, m, mode="eval")
        z2, _ = forward(params, m, mode="eval")
        assert np.array_equal(z1, z2)

    def test_matches_straight_line_oracle(self):
        cfg = ModelConfig(
            d=6, model_dim=4, heads=2, head_dim=2, layers=1,
            ffn_dim=8, mlp_hidden=5, dropout_p=0.0,
        )
        params64 = randomized_params(cfg, 4, dtype=np.float64)
        t64 = params64.tensors
        gen = gen_for(91)
        for _ in range(5):
            m = gen.normal(size=cfg.d)
            want = straight_line_forward(t64, cfg, m)
            got, _ = forward(params64, m, mode="eval")
            assert np.abs(got - want).max() <= 1e-6

    def test_oracle_holds_for_two_layers_float32(self):
        cfg = tiny_config(layers=2, d=10, mlp_hidden=7)
        params = randomized_params(cfg, 5)
        t64 = {n: t.astype(np.float64) for n, t in params.tensors.items()}
        m = gen_for(92).normal(size=cfg.d).astype(np.float32)
        want = straight_line_forward(t64, cfg, m.astype(np.float64))
        got, _ = forward(params, m, mode="eval")
        assert np.abs(got.astype(np.float64) - want).max() <= 1e-4

    def test_batch_independence(self):
        cfg = tiny_config(d=12, mlp_hidden=9)
        params = randomized_params(cfg, 6)
        batch = gen_for(93).normal(size=(3, cfg.d)).astype(np.float32)
        zb, _ = forward(params, batch, mode="eval")
        for i in range(3):
            zi, _ = forward(params, batch[i], mode="eval")
            assert np.abs(zb[i] - zi).max() <= 1e-6

    def test_train_p0_equals_eval(self):
        cfg = tiny_config(d=16, model_dim=8, heads=2, head_dim=4)
        params = randomized_params(cfg, 7)
        m = gen_for(94).normal(size=(4, cfg.d)).astype(np.float32)
        z_eval, _ = forward(params, m, mode="eval")
        z_train, trace = forward(params, m, mode="train")
        assert trace is not None
        assert np.abs(z_train - z_eval).max() <= 1e-6

    def test_fast_and_reference_paths_agree(self):
        cfg = tiny_config(d=16, model_dim=8, heads=4, head_dim=2, layers=2)
        params = randomized_params(cfg, 8)
        m = gen_for(95).normal(size=(3, cfg.d)).astype(np.float32)
        z_fast, _ = forward(params, m, mode="train", fast=True)
        z_ref, _ = forward(params, m, mode="train", fast=False)
        assert np.abs(z_fast - z_ref).max() <= 1e-5

    def test_scratch_reuse_changes_nothing(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 9)
        m = gen_for(96).normal(size=(5, cfg.d)).astype(np.float32)
        plain, _ = forward(params, m, mode="eval")
        scratch: dict = {}
        first, _ = forward(params, m, mode="eval", scratch=scratch)
        again, _ = forward(params, m, mode="eval", scratch=scratch)
        assert np.array_equal(plain, first)
        assert np.array_equal(plain, again)

    def test_dropout_draws_reproducible(self):
        cfg = tiny_config(dropout_p=0.25)
        params = randomized_params(cfg, 10)
        m = gen_for(97).normal(size=(2, cfg.d)).astype(np.float32)
        z1, _ = forward(params, m, mode="train", rng=RngState(11))
        z2, _ = forward(params, m, mode="train", rng=RngState(11))
        z3, _ = forward(params, m, mode="train", rng=RngState(12))
        assert np.array_equal(z1, z2)
        assert not np.array_equal(z1, z3)

    def test_input_validation(self):
        params = randomized_params(tiny_config(), 11)
        with pytest.raises(ContractViolation):
            forward(params, np.ones(5, dtype=np.float32))
        with pytest.raises(ContractViolation):
            forward(params, np.ones(8, dtype=np.float32), mode="predict")
        with pytest.raises(ContractViolation):
            forward(
                params.astype(np.float64), np.ones(8), mode="eval", fast=True
            )

    def test_train_with_dropout_requires_rng(self):
        params = randomized_params(tiny_config(dropout_p=0.1), 12)
        with pytest.raises(ContractViolation):
            forward(params, np.ones(8, dtype=np.float32), mode="train")

    def test_nonfinite_output_reported(self):
        params = randomized_params(tiny_config(), 13)
        params.tensors["mlp_b3"][:] = np.inf
        with pytest.raises(NumericError):
            forward(params, np.ones(8, dtype=np.float32), mode="eval")

    def test_transform_wrapper(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 14)
        m = gen_for(98).normal(size=(4, cfg.d)).astype(np.float32)
        out = transform(params, m)
        want, _ = forward(params, m, mode="eval")
        assert np.array_equal(out, want)


class TestBackward:
    def test_zero_cotangent_gives_zero_grads(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 20)
        m = gen_for(99).normal(size=(2, cfg.d)).astype(np.float32)
        _, trace = forward(params, m, mode="train")
        grads, dm = backward(params, trace, np.zeros((2, cfg.d), dtype=np.float32))
        for name, g in grads.items():
            assert not g.any(), name
        assert not dm.any()

    def test_dm_shape_and_finiteness(self):
        cfg, seed = TINY_CONFIGS[0], 100
        params, stacked = make_instance(cfg, seed)
        _, _, _, trace = pipeline_grads(params, stacked)
        dz = gen_for(101).normal(size=(stacked.shape[0], cfg.d))
        grads, dm = backward(params, trace, dz)
        assert dm.shape == stacked.shape
        assert np.isfinite(dm).all()

    def test_gradients_match_finite_differences(self):
        worst, worst_name = check_gradients(TINY_CONFIGS[0], seed=100)
        assert worst <= 1e-4, worst_name

    def test_trace_params_mismatch_rejected(self):
        cfg = tiny_config()
        a = randomized_params(cfg, 21)
        b = randomized_params(cfg, 22)
        m = gen_for(102).normal(size=(2, cfg.d)).astype(np.float32)
        _, trace = forward(a, m, mode="train")
        with pytest.raises(ContractViolation):
            backward(b, trace, np.zeros((2, cfg.d), dtype=np.float32))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        cfg = tiny_config(layers=2)
        params = randomized_params(cfg, 30)
        path = tmp_path / "model.nbckpt"
        save_checkpoint(params, cfg, path, transform_targets="both")
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == cfg
        for name in tensor_names(cfg):
            assert np.array_equal(loaded.tensors[name], params.tensors[name])
        assert checkpoint_transform_targets(path) == "both"

    def test_identical_params_identical_bytes(self, tmp_path):
        cfg = tiny_config()
        params = randomized_params(cfg, 31)
        p1, p2 = tmp_path / "a.nbckpt", tmp_path / "b.nbckpt"
        save_checkpoint(params, cfg, p1)
        save_checkpoint(params, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "model.nbckpt"
        save_checkpoint(randomized_params(cfg, 32), cfg, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "model.nbckpt"
        save_checkpoint(randomized_params(cfg, 33), cfg, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "model.nbckpt"
        save_checkpoint(randomized_params(cfg, 34), cfg, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_manifest_tamper_rejected(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "model.nbckpt"
        save_checkpoint(randomized_params(cfg, 35), cfg, path)
        blob = path.read_bytes()
        header_len = int.from_bytes(blob[8:12], "little")
        header = json.loads(blob[12 : 12 + header_len])
        header["manifest"][2]["shape"] = [1, 1]
        raw = json.dumps(header).encode()
        rebuilt = (
            blob[:8]
            + len(raw).to_bytes(4, "little")
            + raw
            + blob[12 + header_len :]
        )
        path.write_bytes(rebuilt)
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_layout_is_little_endian_pinned(self, tmp_path):
        # parse the container with explicit little-endian dtypes only
        cfg = tiny_config()
        params = randomized_params(cfg, 36)
        path = tmp_path / "model.nbckpt"
        save_checkpoint(params, cfg, path)
        blob = path.read_bytes()
        assert blob[:4] == b"NBC1"
        assert int.from_bytes(blob[4:8], "little") == 1
        header_len = int.from_bytes(blob[8:12], "little")
        header = json.loads(blob[12 : 12 + header_len])
        payload = blob[12 + header_len :]
        for entry in header["manifest"]:
            lo = entry["byte_offset"]
            arr = np.frombuffer(
                payload, dtype="<f4", count=entry["byte_len"] // 4, offset=lo
            ).reshape(entry["shape"])
            assert np.array_equal(arr, params.tensors[entry["name"]])

    def test_gradcheck_configs_cover_spec_ranges(self):
        assert len(TINY_CONFIGS) >= 5
        for cfg in TINY_CONFIGS:
            assert cfg.d <= 16
            assert cfg.model_dim <= 8
            assert cfg.dropout_p == 0.0
