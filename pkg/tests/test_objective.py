"""Cosine distance, gold averaging, hinge loss, and negative sampling."""

import math

import numpy as np
import pytest

from nbalign.errors import (
    ConfigError,
    ContractViolation,
    DegenerateVectorError,
    SamplingError,
)
from nbalign.numerics import finite_diff_grad, rel_err
from nbalign.objective import (
    LossHyper,
    TrainingExample,
    cosine_distance,
    gold_average,
    margin_loss,
    sample_negatives,
)
from nbalign.rng import RngState

from conftest import gen_for


class TestCosineDistance:
    def test_identical(self):
        v = np.array([1.0, 2.0, 3.0])
        assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_antipodal(self):
        assert cosine_distance(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 2.0

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateVectorError):
            cosine_distance(np.zeros(3), np.ones(3))

    def test_range(self):
        gen = gen_for(51)
        for _ in range(200):
            x = gen.normal(size=5)
            y = gen.normal(size=5)
            d = cosine_distance(x, y)
            assert -1e-12 <= d <= 2.0 + 1e-12


class TestGoldAverage:
    def test_single_vector_identity(self):
        v = np.array([3.0, -1.0, 0.5])
        assert np.array_equal(gold_average([v]), v)

    def test_two_vectors(self):
        out = gold_average([np.array([1.0, 1.0]), np.array([3.0, 3.0])])
        assert np.array_equal(out, [2.0, 2.0])

    def test_matches_double_precision_mean(self):
        gen = gen_for(52)
        rows = gen.normal(size=(7, 12)).astype(np.float32)
        oracle = rows.astype(np.float64).mean(axis=0)
        assert np.abs(gold_average(rows).astype(np.float64) - oracle).max() <= 1e-6

    def test_permutation_invariance(self):
        gen = gen_for(53)
        rows = gen.normal(size=(5, 4))
        perm = rows[[3, 0, 4, 2, 1]]
        assert np.array_equal(gold_average(rows), gold_average(perm))

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            gold_average([])


def _unit_at_cos(c: float) -> np.ndarray:
    """2-D unit vector at a chosen cosine against [1, 0]."""
    return np.array([c, math.sqrt(1.0 - c * c)])


class TestMarginLoss:
    def test_inactive_hinge(self):
        # dcos(a,p)=0.1, dcos(a,n)=0.5, margin 0.2: 0.2+0.1-0.5 < 0
        a = np.array([1.0, 0.0])
        loss, d_a, d_p, d_n = margin_loss(
            a, _unit_at_cos(0.9), _unit_at_cos(0.5)[None, :], 0.2
        )
        assert loss == 0.0
        assert not d_a.any() and not d_p.any() and not d_n.any()

    def test_zero_margin_identical_pair(self):
        a = np.array([0.5, 1.0, -2.0])
        negs = np.stack([np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])])
        loss, *_ = margin_loss(a, a.copy(), negs, 0.0)
        assert loss == 0.0

    def test_active_hinge_value(self):
        # dcos(a,p)=0.3, dcos(a,n)=0.1: hinge = 0.2+0.3-0.1 = 0.4
        a = np.array([1.0, 0.0])
        loss, *_ = margin_loss(a, _unit_at_cos(0.7), _unit_at_cos(0.9)[None, :], 0.2)
        assert loss == pytest.approx(0.4, abs=1e-12)

    def test_loss_nonnegative_and_zero_condition(self):
        gen = gen_for(61)
        for _ in range(100):
            a = gen.normal(size=6)
            p = gen.normal(size=6)
            negs = gen.normal(size=(4, 6))
            margin = float(gen.uniform(0.0, 0.5))
            loss, *_ = margin_loss(a, p, negs, margin)
            assert loss >= 0.0
            d_ap = cosine_distance(a, p)
            slack = [cosine_distance(a, n) - (margin + d_ap) for n in negs]
            if min(slack) >= 0:
                assert loss == 0.0

    def test_scale_invariance(self):
        gen = gen_for(62)
        a = gen.normal(size=8)
        p = gen.normal(size=8)
        negs = gen.normal(size=(3, 8))
        base, *_ = margin_loss(a, p, negs, 0.2)
        scaled, *_ = margin_loss(7.3 * a, 0.04 * p, negs * 51.0, 0.2)
        assert abs(base - scaled) <= 1e-5

    def test_gradients_match_finite_differences(self):
        gen = gen_for(63)
        checked = 0
        for trial in range(20):
            a = gen.normal(size=8)
            p = gen.normal(size=8)
            negs = gen.normal(size=(3, 8))
            loss, d_a, d_p, d_negs = margin_loss(a, p, negs, 0.2)
            # keep every hinge well away from its kink so FD is smooth
            d_ap = cosine_distance(a, p)
            hinges = [0.2 + d_ap - cosine_distance(a, n) for n in negs]
            if loss == 0.0 or min(abs(h) for h in hinges) < 1e-2:
                continue
            fd_a = finite_diff_grad(
                lambda t: margin_loss(t, p, negs, 0.2)[0], a.copy(), h=1e-6
            )
            fd_p = finite_diff_grad(
                lambda t: margin_loss(a, t, negs, 0.2)[0], p.copy(), h=1e-6
            )
            fd_n = finite_diff_grad(
                lambda t: margin_loss(a, p, t.reshape(3, 8), 0.2)[0],
                negs.ravel().copy(),
                h=1e-6,
            ).reshape(3, 8)
            assert rel_err(d_a, fd_a).max() <= 1e-4
            assert rel_err(d_p, fd_p).max() <= 1e-4
            active = np.abs(d_negs).sum(axis=1) > 0
            assert rel_err(d_negs[active], fd_n[active]).max() <= 1e-4
            checked += 1
        assert checked >= 5

    def test_empty_negatives_rejected(self):
        with pytest.raises(ContractViolation):
            margin_loss(np.ones(3), np.ones(3), np.empty((0, 3)), 0.2)

    def test_degenerate_negative_rejected(self):
        negs = np.stack([np.ones(3), np.zeros(3)])
        with pytest.raises(DegenerateVectorError):
            margin_loss(np.ones(3), np.ones(3), negs, 0.2)


class TestSampleNegatives:
    def test_forced_complement(self):
        out = sample_negatives(20, {3}, 19, RngState(1))
        assert sorted(out.tolist()) == [i for i in range(20) if i != 3]

    def test_determinism(self):
        a = sample_negatives(10_000, {0}, 15, RngState(42))
        b = sample_negatives(10_000, {0}, 15, RngState(42))
        assert np.array_equal(a, b)

    def test_never_hits_gold(self):
        gen = gen_for(71)
        rng = RngState(7)
        for _ in range(300):
            gold = set(gen.choice(50, size=gen.integers(1, 10), replace=False).tolist())
            out = sample_negatives(50, gold, 8, rng)
            assert len(set(out.tolist())) == 8
            assert not set(out.tolist()) & gold

    def test_uniformity(self):
        n_draws = 100_000
        gen = RngState(123).stream("negatives")
        counts = np.zeros(50, dtype=np.int64)
        for _ in range(n_draws):
            counts[sample_negatives(50, set(), 1, gen)[0]] += 1
        expect = n_draws / 50
        sigma = math.sqrt(n_draws * (1 / 50) * (49 / 50))
        assert np.abs(counts - expect).max() <= 3.0 * sigma

    def test_insufficient_pool(self):
        with pytest.raises(SamplingError):
            sample_negatives(10, set(range(8)), 3, RngState(0))

    def test_invalid_k(self):
        with pytest.raises(ContractViolation):
            sample_negatives(10, set(), 0, RngState(0))


class TestHyperValidation:
    def test_defaults(self):
        h = LossHyper()
        assert h.margin == 0.2
        assert h.negatives == 15
        assert h.transform_targets == "both"

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            LossHyper(margin=-0.1)
        with pytest.raises(ConfigError):
            LossHyper(negatives=0)
        with pytest.raises(ConfigError):
            LossHyper(transform_targets="subjects")

    def test_example_requires_gold(self):
        with pytest.raises(ContractViolation):
            TrainingExample(article_row=0, gold_codes=frozenset(), positive=np.ones(3))
