import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmprune import autodiff as ad
from nmprune.gumbel import (GumbelSchedule, MaskDistribution, NoiseSource, differentiable_mask, gumbel_from_uniform,
                            probability_from_logits, sample_gumbel, schedule_at, soft_index)
from nmprune.masks import enumerate_candidates

from conftest import numeric_grad, rel_err

S24 = enumerate_candidates(2, 4)
finite = st.floats(-20, 20, allow_nan=False)


def test_gumbel_formula_points():
    assert gumbel_from_uniform(1 / math.e) == pytest.approx(0.0, abs=1e-15)
    assert gumbel_from_uniform(0.5) == pytest.approx(0.36651, abs=1e-5)


def test_gumbel_mean_is_euler_gamma():
    g = sample_gumbel(NoiseSource(0), 1_000_000)
    assert abs(g.mean() - 0.5772) < 0.01
    assert np.isfinite(g).all()


def test_noise_clamp_and_determinism():
    ns = NoiseSource(3)
    u = ns.uniform(100_000)
    assert u.min() > 1e-10 and u.max() < 1 - 1e-10
    assert np.array_equal(NoiseSource(9).gumbel(50), NoiseSource(9).gumbel(50))
    a = NoiseSource(4)
    a.gumbel(10)
    state = a.get_state()
    x = a.gumbel(10)
    a.set_state(state)
    assert np.array_equal(a.gumbel(10), x)


def test_soft_index_examples():
    y = soft_index(np.zeros(6), np.zeros(6), 1.0, 1.0).data
    assert np.allclose(y, 1 / 6, atol=1e-15)
    y = soft_index(np.array([1.0, 0, 0, 0, 0, 0]), np.zeros(6), 0.05, 100.0).data
    assert y.max() > 1 - 1e-9
    with pytest.raises(ValueError):
        soft_index(np.zeros(6), np.zeros(6), 0.0, 1.0)


@settings(max_examples=200)
@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=6, max_size=6),
       st.floats(0.05, 4.0), st.floats(1.0, 500.0), st.floats(-100, 100))
def test_soft_index_normalized_and_shift_invariant(logits, noise, tau, kappa, c):
    logits, noise = np.array(logits) / 100, np.array(noise)
    y = soft_index(logits, noise, tau, kappa).data
    assert abs(y.sum() - 1) <= 1e-12
    y2 = soft_index(logits + c, noise, tau, kappa).data
    assert np.abs(y - y2).max() <= 1e-12


@settings(max_examples=200)
@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=6, max_size=6),
       st.floats(0.05, 4.0), st.floats(0.05, 4.0))
def test_soft_index_max_grows_as_tau_falls(logits, noise, t1, t2):
    lo, hi = sorted((t1, t2))
    a = soft_index(np.array(logits) / 10, np.array(noise), hi, 1.0).data.max()
    b = soft_index(np.array(logits) / 10, np.array(noise), lo, 1.0).data.max()
    assert b >= a - 1e-15


def test_soft_index_jacobian():
    rng = np.random.default_rng(0)
    logits, noise = rng.normal(size=(3, 6)), rng.gumbel(size=(3, 6))
    w = ad.Tensor(rng.normal(size=(3, 6)))
    leaf = ad.Tensor(logits.copy(), requires_grad=True)
    ad.backward(ad.sum_(ad.mul(soft_index(leaf, noise, 0.7, 1.3), w)))
    num = numeric_grad(lambda: float((soft_index(logits, noise, 0.7, 1.3).data * w.data).sum()), logits)
    assert rel_err(leaf.grad, num) <= 1e-5


def test_differentiable_mask_examples():
    assert differentiable_mask(np.eye(6)[0], S24).data.tolist() == [1, 1, 0, 0]
    assert np.allclose(differentiable_mask(np.full(6, 1 / 6), S24).data, 0.5)
    assert np.allclose(differentiable_mask(np.array([0.5, 0, 0, 0, 0, 0.5]), S24).data, 0.5)


def test_differentiable_mask_sums_to_n_on_simplex():
    rng = np.random.default_rng(1)
    pts = rng.dirichlet(np.ones(6), size=10_000)
    sums = differentiable_mask(pts, S24).data.sum(-1)
    assert np.abs(sums - 2).max() <= 1e-12
    s18 = enumerate_candidates(1, 8)
    p = rng.dirichlet(np.ones(8), size=100)
    assert np.abs(differentiable_mask(p, s18).data.sum(-1) - 1).max() <= 1e-12


def test_probability_from_logits():
    assert np.allclose(probability_from_logits(np.zeros(6), 3.0), 1 / 6)
    p = probability_from_logits(np.array([0.0, 0.1, 0.05, 0, 0, 0]), 1e4)
    assert p[1] > 1 - 1e-12
    rng = np.random.default_rng(2)
    pi = rng.normal(size=(50, 6))
    for kappa in (1e-3, 1.0, 1e3):
        assert np.array_equal(probability_from_logits(pi, kappa).argmax(-1), pi.argmax(-1))


def test_schedule_endpoints_and_midpoint():
    s = GumbelSchedule(total_steps=2000)
    assert schedule_at(s, 0) == (4.0, 100.0)
    assert schedule_at(s, 2000) == (0.05, 500.0)
    tau, kappa = schedule_at(s, 1000)
    assert kappa == 300.0
    assert tau == pytest.approx(math.sqrt(4.0 * 0.05))
    lin = GumbelSchedule(total_steps=10, tau_decay="linear")
    assert schedule_at(lin, 5)[0] == pytest.approx((4.0 + 0.05) / 2)
    with pytest.raises(ValueError):
        schedule_at(s, 2001)
    with pytest.raises(ValueError):
        GumbelSchedule(tau_start=0.01, tau_end=1.0)


def test_schedule_monotone():
    s = GumbelSchedule(total_steps=100)
    vals = [s.at(i) for i in range(101)]
    taus, kappas = zip(*vals)
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert all(a <= b for a, b in zip(kappas, kappas[1:]))


def test_mask_distribution_soft_mask_shape_and_sum():
    rng = np.random.default_rng(0)
    d = MaskDistribution("w", 3, 8, rng.normal(size=(6, 6)), S24)
    m = d.soft_mask(rng.gumbel(size=(6, 6)), 1.0, 10.0)
    assert m.shape == (3, 8)
    assert np.allclose(m.data.reshape(3, 2, 4).sum(-1), 2)
    hard = d.hard_mask()
    assert np.array_equal(hard.block_indices.reshape(-1), d.logits.data.argmax(-1))
    with pytest.raises(ValueError):
        MaskDistribution("w", 3, 8, np.zeros((5, 6)), S24)
