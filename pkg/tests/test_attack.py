import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import LinearSoftmax
from wavadv.attack import AttackConfig, accumulation_effect, attack_batch, fgsm, iterative_fgsm
from wavadv.audio import Waveform
from wavadv.nets import ModelConfig, build_wavecnn


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, clip_min=1.0, clip_max=0.0)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, ball=0.05)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, steps=0)
    assert AttackConfig(epsilon=0.02, steps=2).radius == 0.04


def test_fgsm_linear_sign_example():
    m = LinearSoftmax([1.0, -2.0, 3.0])
    r = fgsm(m, np.array([0.5, 0.5, 0.5]), "neg", AttackConfig(epsilon=0.1))
    np.testing.assert_array_equal(r.eta, [0.1, -0.1, 0.1])
    np.testing.assert_array_equal(r.adversarial.samples, np.array([0.5, 0.5, 0.5]) + r.eta)
    assert r.loss_after > r.loss_before
    assert r.linf == 0.1


def test_fgsm_clips_to_range():
    m = LinearSoftmax([1.0, 1.0])
    r = fgsm(m, np.array([0.99, 0.5]), 0, AttackConfig(epsilon=0.02))
    assert r.adversarial.samples[0] == 1.0
    assert r.adversarial.samples[1] == pytest.approx(0.52, abs=2e-16)
    assert r.adversarial.samples[1] - 0.5 <= 0.02


def test_zero_epsilon_is_identity():
    m = LinearSoftmax([1.0, -1.0, 0.5])
    x = np.array([0.2, 0.4, 0.6])
    r = fgsm(m, x, 1, AttackConfig(epsilon=0.0))
    np.testing.assert_array_equal(r.adversarial.samples, x)
    np.testing.assert_array_equal(r.pred_before, r.pred_after)


def test_null_gradient_flagged():
    m = LinearSoftmax(np.zeros(4))
    x = np.full(4, 0.5)
    r = fgsm(m, x, 0, AttackConfig(epsilon=0.1))
    assert r.null_gradient
    np.testing.assert_array_equal(r.eta, 0.0)
    np.testing.assert_array_equal(r.adversarial.samples, x)


def test_sign_zero_components_untouched():
    m = LinearSoftmax([2.0, 0.0, -1.0])
    r = fgsm(m, np.full(3, 0.5), 0, AttackConfig(epsilon=0.0625))
    np.testing.assert_array_equal(r.eta, [0.0625, 0.0, -0.0625])
    assert not r.null_gradient


def test_fgsm_requires_one_step():
    with pytest.raises(ValueError):
        fgsm(LinearSoftmax([1.0]), np.array([0.5]), 0, AttackConfig(epsilon=0.1, steps=2))


def test_iterative_linear_matches_double_eps():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(50)
    x = rng.uniform(0.3, 0.7, 50)
    m = LinearSoftmax(w)
    two = iterative_fgsm(m, x, 0, AttackConfig(epsilon=0.01, steps=2))
    one = fgsm(m, x, 0, AttackConfig(epsilon=0.02))
    np.testing.assert_allclose(two.eta, one.eta, rtol=0, atol=1e-17)
    np.testing.assert_allclose(two.adversarial.samples, one.adversarial.samples, rtol=0, atol=1e-16)


def test_iterative_one_step_bit_identical_on_network():
    cfg = ModelConfig(clip_seconds=0.2, frontend_blocks=2, backend_blocks=2, conv_features=4, kernel_len=8)
    m = build_wavecnn(cfg, seed=1)
    x = Waveform(np.random.default_rng(1).uniform(0.2, 0.8, cfg.n_samples), cfg.sample_rate)
    a = fgsm(m, x, 1, AttackConfig(epsilon=0.01))
    b = iterative_fgsm(m, x, 1, AttackConfig(epsilon=0.01, steps=1))
    assert a.adversarial.samples.tobytes() == b.adversarial.samples.tobytes()
    assert a.eta.tobytes() == b.eta.tobytes()
    assert a.loss_after == b.loss_after


def test_iterative_respects_ball_on_network():
    cfg = ModelConfig(clip_seconds=0.2, frontend_blocks=2, backend_blocks=2, conv_features=4, kernel_len=8)
    m = build_wavecnn(cfg, seed=2)
    X = np.random.default_rng(2).uniform(0.0, 1.0, (4, cfg.n_samples))
    for steps in (1, 2, 3):
        eps = 0.03
        b = attack_batch(m, X, [0, 1, 0, 1], AttackConfig(epsilon=eps, steps=steps))
        assert np.max(np.abs(b.adversarial - X)) <= steps * eps
        assert b.adversarial.min() >= 0.0 and b.adversarial.max() <= 1.0


def test_custom_ball():
    m = LinearSoftmax([1.0, -1.0])
    r = iterative_fgsm(m, np.full(2, 0.5), 0, AttackConfig(epsilon=0.02, steps=5, ball=0.03))
    d = np.abs(r.adversarial.samples - 0.5)
    assert np.all(d <= 0.03) and np.all(d > 0.03 - 1e-16)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 12, elements=st.floats(-5, 5)),
    arrays(np.float64, 12, elements=st.floats(0, 1)),
    st.floats(0, 0.2),
    st.integers(1, 4),
    st.integers(0, 1),
)
def test_linf_and_range_invariants(w, x, eps, steps, label):
    r = iterative_fgsm(LinearSoftmax(w), x, label, AttackConfig(epsilon=eps, steps=steps))
    adv = r.adversarial.samples
    assert np.max(np.abs(adv - x)) <= steps * eps
    assert r.linf <= steps * eps + 1e-12
    assert np.all((adv >= 0) & (adv <= 1))
    np.testing.assert_array_equal(adv, np.clip(x + r.eta, 0.0, 1.0))


def test_accumulation_examples():
    r = accumulation_effect(np.full(1000, 0.5), 0.01)
    assert r.delta_activation == 5.0 and r.m == 0.5 and r.n == 1000 and r.consistent
    z = accumulation_effect(np.zeros(7), 0.3)
    assert z.delta_activation == 0.0 and z.consistent


def test_accumulation_exact_and_doubling():
    rng = np.random.default_rng(12)
    for _ in range(100):
        w = rng.standard_normal(rng.integers(1, 3000)) * rng.uniform(0.01, 10)
        eps = rng.uniform(1e-4, 0.1)
        r = accumulation_effect(w, eps)
        assert r.delta_activation == eps * math.fsum(np.abs(w))
        assert r.delta_activation == eps * math.fsum(w * np.sign(w))
        assert accumulation_effect(np.concatenate([w, w]), eps).delta_activation == 2 * r.delta_activation
        assert r.consistent
