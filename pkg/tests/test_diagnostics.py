import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wsnorm.diagnostics import (channel_stat_propagation, grad_reduction_terms, hessian_checks, quadratic_toy_loss,
                                statdiff, tiny_net_loss, underrep_rate)
from wsnorm.norms import NormState, bn_forward, fixed_stats_forward
from wsnorm.reparam import ws_parts
from wsnorm.tensor import Tensor, verification_mode


def test_statdiff_identical_channels_is_zero():
    np.testing.assert_array_equal(statdiff(np.full(8, 0.3), np.full(8, 2.0), 4), 0.0)


def test_statdiff_two_channel_example():
    np.testing.assert_allclose(statdiff([1.0, -1.0], [1.0, 1.0], 1), [1.0])


def test_statdiff_explicit_groups():
    out = statdiff([1.0, -1.0, 5.0, 5.0], [1.0, 1.0, 2.0, 2.0], [np.array([0, 1]), np.array([2, 3])])
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_statdiff_rejects_zero_stds():
    with pytest.raises(ValueError):
        statdiff([1.0, 2.0], [0.0, 0.0], 1)


def test_statdiff_nonnegative_on_random_inputs(rng):
    for _ in range(1000):
        c = int(rng.integers(1, 9))
        assert statdiff(rng.normal(size=c), np.abs(rng.normal(size=c)) + 1e-3, 1)[0] >= 0


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(0.1, 10)),
       st.floats(0.01, 100))
def test_statdiff_scale_invariant(mu, sd, k):
    np.testing.assert_allclose(statdiff(k * mu, k * sd, 2), statdiff(mu, sd, 2), rtol=1e-9, atol=1e-12)


def _ws_layer(seed, o=5, n=12):
    rng = np.random.default_rng(seed)
    parts = ws_parts(Tensor(rng.normal(size=(o, n)), requires_grad=True), 1e-10)
    parts.standardized.retain_grad()
    parts.centered.retain_grad()
    return parts, rng


def test_grad_reduction_zero_gradient():
    parts, _ = _ws_layer(0)
    z = np.zeros((5, 12))
    rec = grad_reduction_terms(parts, z, z, z)
    assert (rec.term_ws, rec.term_mean, rec.term_total, rec.r1, rec.r2) == (0, 0, 0, 0, 0)


def test_grad_reduction_identities_hold_on_random_layer():
    with verification_mode():
        parts, rng = _ws_layer(3)
        (parts.standardized * rng.normal(size=(5, 12))).sum().backward()
        rec = grad_reduction_terms(parts)
    assert rec.r1 < 1e-8 and rec.r2 < 1e-8
    assert min(rec.term_ws, rec.term_mean, rec.term_total) >= 0


def test_grad_reduction_missing_grads():
    parts, _ = _ws_layer(1)
    with pytest.raises(ValueError, match="gradients missing"):
        grad_reduction_terms(parts)


def test_grad_reduction_terms_hand_computed():
    parts, rng = _ws_layer(4, o=2, n=6)
    g = rng.normal(size=(2, 6))
    w_hat = parts.standardized.data
    rec = grad_reduction_terms(parts, g, np.zeros_like(g), np.zeros_like(g))
    np.testing.assert_allclose(rec.term_ws, np.mean((w_hat * g).sum(1) ** 2 / 6))
    np.testing.assert_allclose(rec.term_mean, np.mean(g.sum(1) ** 2 / 6))


def test_hessian_of_quadratic_toy_is_centering_projector():
    n = 7
    rep = hessian_checks(quadratic_toy_loss, np.random.default_rng(0).normal(size=n), h=1e-3)
    expected = np.eye(n) - np.ones((n, n)) / n
    np.testing.assert_allclose(rep.hessian_centered_input, np.eye(n), atol=1e-8)
    np.testing.assert_allclose(rep.hessian, expected, atol=1e-8)
    assert abs(rep.total_sum) < 1e-8
    assert rep.frob2 == pytest.approx(n - 1, abs=1e-7)
    assert rep.frob2_bound == pytest.approx(n - 1, abs=1e-7)
    assert rep.zero_sum_ok and rep.frobenius_ok


@pytest.mark.parametrize("seed", range(2))
def test_hessian_checks_on_tiny_net(seed):
    loss_fn, row = tiny_net_loss(seed)
    rep = hessian_checks(loss_fn, row)
    assert rep.fan_in <= 16
    assert rep.zero_sum_ok and rep.frobenius_ok


def test_ws_reduces_output_channel_statdiff():
    rep = channel_stat_propagation(seeds=20)
    assert rep["statdiff_ws"] < rep["statdiff_plain"]


def test_constant_input_through_standardized_rows_gives_zero_output():
    from wsnorm import ops
    from wsnorm.reparam import ws_forward
    raw = np.random.default_rng(0).normal(size=(4, 3, 3, 3))
    w = ws_forward(Tensor(raw), 1e-10).reshape(raw.shape)
    y = ops.conv2d(Tensor(np.full((2, 3, 5, 5), 1.7)), w, 1, 0).data
    np.testing.assert_allclose(y, 0.0, atol=1e-12)


def test_underrep_rate_zero_after_bn(rng):
    x = bn_forward(Tensor(rng.normal(size=(16, 6, 4, 4))), NormState.create("bn", 6, dtype=np.float64)).data
    assert underrep_rate(x) == 0.0


def test_underrep_rate_counts_shifted_channel(rng):
    st_ = NormState.create("fixed", 4, dtype=np.float64)
    st_.fixed_mu = np.array([0.0, -10.0, 0.0, 0.0])
    st_.fixed_sigma = np.array([1.0, 0.1, 1.0, 1.0])
    x = fixed_stats_forward(Tensor(rng.normal(size=(16, 4, 4, 4))), st_).data
    assert underrep_rate(x) == 0.25


def test_underrep_rate_empty_sample():
    with pytest.raises(ValueError):
        underrep_rate(np.zeros((0, 3)))
