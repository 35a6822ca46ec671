"""Loss values against hand-computed cases, bounds under fuzzing, and
gradients against finite differences."""

import numpy as np
import pytest

from gradcheck import assert_grad_close, numeric_grad
from rateinv.losses import (
    LossConfig,
    am_softmax_grad,
    am_softmax_loss,
    cosine_adversarial_grad,
    cosine_adversarial_loss,
    rate_ce_grad,
    rate_ce_loss,
    total_loss,
)


class TestCosineAdversarial:
    def test_parallel_is_one(self):
        assert cosine_adversarial_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal_is_zero(self):
        assert cosine_adversarial_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_45_degrees_is_half(self):
        loss = cosine_adversarial_loss(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(0.5, abs=1e-12)

    def test_antiparallel_is_one(self):
        loss = cosine_adversarial_loss(np.array([2.0, 0.0]), np.array([-3.0, 0.0]))
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_bounds_under_fuzzing(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            d = int(rng.integers(1, 16))
            u = rng.standard_normal(d) * 10 ** rng.uniform(-6, 3)
            v = rng.standard_normal(d) * 10 ** rng.uniform(-6, 3)
            loss = cosine_adversarial_loss(u, v)
            assert 0.0 <= loss <= 1.0

    def test_scale_invariance_above_floor(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            u = rng.standard_normal(6)
            v = rng.standard_normal(6)
            c = 10 ** rng.uniform(-2, 3)
            base = cosine_adversarial_loss(u, v)
            assert cosine_adversarial_loss(c * u, v) == pytest.approx(base, rel=1e-9)
            assert cosine_adversarial_loss(u, c * v) == pytest.approx(base, rel=1e-9)

    def test_zero_vector_handled_by_floor(self):
        loss, du, dv = cosine_adversarial_grad(np.zeros(4), np.ones(4))
        assert loss == 0.0
        assert np.all(np.isfinite(du)) and np.all(np.isfinite(dv))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cosine_adversarial_loss(np.zeros(3), np.zeros(4))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            u = rng.standard_normal(5)
            v = rng.standard_normal(5)
            _, du, dv = cosine_adversarial_grad(u, v)
            assert_grad_close(du, numeric_grad(lambda: cosine_adversarial_loss(u, v), u), label="du")
            assert_grad_close(dv, numeric_grad(lambda: cosine_adversarial_loss(u, v), v), label="dv")


class TestAmSoftmax:
    def test_reduces_to_softmax_ce(self):
        loss = am_softmax_loss(np.array([1.0, 0.0]), 0, s=1.0, m=0.0)
        assert loss == pytest.approx(-np.log(np.e / (np.e + 1.0)), abs=1e-12)

    def test_confident_margin_case(self):
        loss = am_softmax_loss(np.array([1.0, 0.0]), 0, s=30.0, m=0.2)
        assert loss < 1e-9

    def test_uniform_cosines_give_log_c(self):
        for c in (2, 3, 7):
            loss = am_softmax_loss(np.full(c, 0.3), 1, s=30.0, m=0.0)
            assert loss == pytest.approx(np.log(c), abs=1e-10)

    def test_equals_ce_on_scaled_cosines_when_no_margin(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            cosines = rng.uniform(-1, 1, 5)
            label = int(rng.integers(5))
            s = float(rng.uniform(1, 40))
            am = am_softmax_loss(cosines, label, s=s, m=0.0)
            ce = rate_ce_loss(s * cosines, label)
            assert am == pytest.approx(ce, abs=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            cosines = rng.uniform(-1, 1, 6)
            label = int(rng.integers(6))
            _, dcos = am_softmax_grad(cosines, label, s=10.0, m=0.2)
            numeric = numeric_grad(lambda: am_softmax_loss(cosines, label, s=10.0, m=0.2), cosines)
            assert_grad_close(dcos, numeric, label="am_softmax")

    def test_bad_label(self):
        with pytest.raises(ValueError):
            am_softmax_loss(np.zeros(3), 5)


class TestRateCe:
    def test_uniform_logits(self):
        for label in range(3):
            assert rate_ce_loss(np.zeros(3), label) == pytest.approx(np.log(3.0), abs=1e-12)

    def test_one_hot_limit(self):
        logits = np.array([200.0, 0.0, 0.0])
        assert rate_ce_loss(logits, 0) < 1e-12

    def test_matches_bruteforce_logsumexp(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            logits = rng.standard_normal(3) * rng.uniform(0.1, 50)
            label = int(rng.integers(3))
            brute = -logits[label] + np.log(np.sum(np.exp(logits - logits.max()))) + logits.max()
            assert rate_ce_loss(logits, label) == pytest.approx(brute, rel=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            logits = rng.standard_normal(3)
            label = int(rng.integers(3))
            _, dlogits = rate_ce_grad(logits, label)
            numeric = numeric_grad(lambda: rate_ce_loss(logits, label), logits)
            assert_grad_close(dlogits, numeric, label="rate_ce")


class TestTotal:
    def test_paper_weighting(self):
        cfg = LossConfig(lambda1=0.1, lambda2=0.1)
        assert total_loss(2.0, 1.0, 0.5, cfg) == pytest.approx(2.15, abs=1e-12)

    def test_degenerate_weights(self):
        cfg = LossConfig(lambda1=0.0, lambda2=0.0)
        assert total_loss(3.3, 100.0, 100.0, cfg) == 3.3

    def test_linearity_in_rate_term(self):
        cfg = LossConfig(lambda1=0.1, lambda2=0.1)
        base = total_loss(1.0, 2.0, 3.0, cfg)
        doubled = total_loss(1.0, 4.0, 3.0, cfg)
        assert doubled - base == pytest.approx(0.1 * 2.0, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lambda1=-0.1)
        with pytest.raises(ValueError):
            LossConfig(am_margin=1.0)
        with pytest.raises(ValueError):
            LossConfig(am_scale=0.0)
        with pytest.raises(ValueError):
            LossConfig(epsilon=0.0)
