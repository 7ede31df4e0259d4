"""AdamW update math against hand-derived values."""

import numpy as np
import pytest

from lcgdiff.optim import AdamWConfig, adamw_step, init_adamw
from lcgdiff.tensor import Tensor


def _single(value=0.0):
    p = Tensor(np.array([value]), requires_grad=True)
    named = {"w": p}
    return p, named, init_adamw(named)


class TestStepMath:
    def test_first_step_closed_form(self):
        p, named, state = _single(0.0)
        cfg = AdamWConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        adamw_step(named, {"w": np.array([2.0])}, state, cfg)
        # Bias correction makes the first step direction exactly g/|g|.
        m_hat = (1 - 0.9) * 2.0 / (1 - 0.9)
        v_hat = (1 - 0.999) * 4.0 / (1 - 0.999)
        expected = -0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-15)

    def test_two_steps_tracked_moments(self):
        p, named, state = _single(1.0)
        cfg = AdamWConfig(lr=0.05, beta1=0.5, beta2=0.9, eps=0.0, weight_decay=0.0)
        g1, g2 = np.array([1.0]), np.array([-2.0])
        adamw_step(named, {"w": g1}, state, cfg)
        adamw_step(named, {"w": g2}, state, cfg)
        m = 0.5 * (0.5 * 1.0) + 0.5 * (-2.0)
        v = 0.9 * (0.1 * 1.0) + 0.1 * 4.0
        m_hat = m / (1 - 0.5**2)
        v_hat = v / (1 - 0.9**2)
        step1 = 0.05 * 1.0  # first update moves by exactly lr when eps is 0
        expected = 1.0 - step1 - 0.05 * m_hat / np.sqrt(v_hat)
        np.testing.assert_allclose(p.data, [expected], rtol=1e-12)

    def test_decay_is_decoupled_from_gradient(self):
        p, named, state = _single(4.0)
        cfg = AdamWConfig(lr=0.1, weight_decay=0.01)
        for _ in range(3):
            adamw_step(named, {"w": np.zeros(1)}, state, cfg)
        # Zero gradients leave the adaptive term at zero; only decay acts.
        np.testing.assert_allclose(p.data, [4.0 * (1 - 0.1 * 0.01) ** 3], rtol=1e-15)

    def test_missing_gradient_means_zero(self):
        p, named, state = _single(2.0)
        cfg = AdamWConfig(lr=0.1, weight_decay=0.01)
        adamw_step(named, {}, state, cfg)
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.01)], rtol=1e-15)


class TestGuards:
    def test_state_param_mismatch(self):
        p, named, state = _single()
        with pytest.raises(ValueError, match="does not match"):
            adamw_step({"other": p}, {}, state, AdamWConfig())

    def test_gradient_shape_mismatch(self):
        _, named, state = _single()
        with pytest.raises(ValueError, match="shape"):
            adamw_step(named, {"w": np.zeros((2, 2))}, state, AdamWConfig())


def test_update_is_deterministic():
    rng = np.random.default_rng(0)
    values = {f"p{i}": rng.standard_normal((3, 2)) for i in range(4)}
    grads = {f"p{i}": rng.standard_normal((3, 2)) for i in range(4)}
    results = []
    for _ in range(2):
        named = {k: Tensor(v.copy(), requires_grad=True) for k, v in values.items()}
        state = init_adamw(named)
        for _ in range(5):
            adamw_step(named, grads, state, AdamWConfig())
        results.append({k: t.data.copy() for k, t in named.items()})
    for k in values:
        np.testing.assert_array_equal(results[0][k], results[1][k])


def test_step_counter_advances():
    _, named, state = _single()
    assert state.step == 0
    adamw_step(named, {}, state, AdamWConfig())
    adamw_step(named, {}, state, AdamWConfig())
    assert state.step == 2
