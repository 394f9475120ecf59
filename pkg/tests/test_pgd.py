import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecoba.dataset import binarize
from ecoba.model import Dense, Flatten, Model, ReLU, Softmax
from ecoba.pgd import PgdConfig, binarization_defense_rate, pgd_attack


def gray_model(seed=0):
    rng = np.random.default_rng(seed)
    m = Model([Flatten((1, 5, 5)), Dense(25, 8), ReLU(), Dense(8, 3), Softmax(3)], (1, 5, 5))
    for layer in (m.layers[1], m.layers[3]):
        layer.params["W"] = rng.normal(size=layer.params["W"].shape).astype(np.float32)
    return m


def test_zero_epsilon_is_identity():
    x = np.random.default_rng(0).random((4, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(pgd_attack(gray_model(), x, [0, 1, 2, 0], PgdConfig(0.0, 0.05, 5)), x)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), eps=st.floats(0.01, 0.9), frac=st.floats(0.1, 1.0),
       steps=st.integers(1, 10))
def test_projection_contract(seed, eps, frac, steps):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 5, 5)).astype(np.float32)
    adv = pgd_attack(gray_model(seed), x, rng.integers(0, 3, 3), PgdConfig(eps, eps * frac, steps))
    assert np.abs(adv - x).max() <= eps + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


def test_pgd_raises_loss():
    from ecoba.model import loss_and_grad
    m = gray_model(3)
    x = np.random.default_rng(1).random((16, 5, 5)).astype(np.float32)
    y = m(x).argmax(axis=1)
    adv = pgd_attack(m, x, y, PgdConfig(0.2, 0.05, 10))
    assert loss_and_grad(m, adv, y)[0] > loss_and_grad(m, x, y)[0]


def test_sub_threshold_perturbation_keeps_binarization():
    # already-binary inputs: a budget below 0.5 cannot cross the threshold, so
    # binarizing the adversarial image recovers the clean one exactly and a
    # classifier shared by both views is restored on every fooled sample
    rng = np.random.default_rng(2)
    x = (rng.random((40, 5, 5)) < 0.5).astype(np.float32)
    m = gray_model(4)
    y = m(x).argmax(axis=1)
    cfg = PgdConfig(0.3, 0.1, 10)
    adv = pgd_attack(m, x, y, cfg)
    np.testing.assert_array_equal(binarize(adv), x.astype(np.uint8))
    stats, _, _ = binarization_defense_rate(m, m, x, y, cfg)
    assert stats.fooled > 0
    assert stats.crossed == 0
    assert stats.restoration_rate == 1.0


def test_defense_limit_and_vacuous_rate():
    x = np.random.default_rng(5).random((30, 5, 5)).astype(np.float32)
    m = gray_model(5)
    y = m(x).argmax(axis=1)
    stats, idx, adv = binarization_defense_rate(m, m, x, y, PgdConfig(0.0, 0.05, 3))
    assert stats.fooled == 0 and stats.restoration_rate == 1.0 and len(idx) == 0
    stats, idx, adv = binarization_defense_rate(m, m, x, y, PgdConfig(0.5, 0.1, 10), limit=3, batch=4)
    assert stats.fooled == len(idx) == len(adv) <= 3


def test_config_validation():
    for args in [(0.2, 0.3, 5), (0.2, 0.0, 5), (1.0, 0.1, 5), (0.2, 0.1, 0)]:
        with pytest.raises(ValueError):
            PgdConfig(*args)
