import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsnorm.norms import (MicroBatchError, NormKind, NormState, bcn_large_forward, bcn_micro_forward, bn_forward,
                          cn_forward, default_groups, fixed_stats_forward, norm_forward, sample_fixed_stats)
from wsnorm.tensor import Tensor


def state(kind, c, groups=None, eps=1e-5, **kw):
    s = NormState.create(kind, c, groups=groups, dtype=np.float64, **kw)
    s.eps = eps
    return s


def ln_reference(x, eps):
    m = x.mean(axis=(1, 2, 3), keepdims=True)
    return (x - m) / np.sqrt(x.var(axis=(1, 2, 3), keepdims=True) + eps)


def in_reference(x, eps):
    m = x.mean(axis=(2, 3), keepdims=True)
    return (x - m) / np.sqrt(x.var(axis=(2, 3), keepdims=True) + eps)


def test_bn_two_value_example():
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    np.testing.assert_array_equal(bn_forward(x, state("bn", 1, eps=0.0)).data.ravel(), [-1.0, 1.0])


def test_bn_constant_channel_is_zero():
    out = bn_forward(Tensor(np.full((4, 2, 3, 3), 5.0)), state("bn", 2))
    np.testing.assert_array_equal(out.data, 0.0)


def test_bn_statistics(rng):
    out = bn_forward(Tensor(rng.normal(3.0, 5.0, size=(8, 4, 5, 5))), state("bn", 4)).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-6


def test_bn_running_stats_update(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    s = state("bn", 2)
    bn_forward(Tensor(x), s)
    n = 4 * 9
    np.testing.assert_allclose(s.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_bn_batch_of_one_value_raises():
    with pytest.raises(MicroBatchError):
        bn_forward(Tensor(np.ones((1, 3, 1, 1))), state("bn", 3))


def test_bn_eval_is_affine_but_cn_is_not(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    bn = state("bn", 3)
    bn.running_mean, bn.running_var = rng.normal(size=3), np.exp(rng.normal(size=3))
    bn.mode = "eval"
    f0, f1 = bn_forward(Tensor(x), bn).data, bn_forward(Tensor(2.5 * x + 1.0), bn).data
    const = bn_forward(Tensor(np.full_like(x, 1.0)), bn).data - bn_forward(Tensor(np.zeros_like(x)), bn).data
    # f(a x + b) = a f(x) + const with const depending only on b
    np.testing.assert_allclose(f1, 2.5 * f0 - 1.5 * bn_forward(Tensor(np.zeros_like(x)), bn).data + const, atol=1e-12)
    cn = state("cn", 3, groups=1)
    g0, g1 = cn_forward(Tensor(x), cn).data, cn_forward(Tensor(2.5 * x + 1.0), cn).data
    gz = cn_forward(Tensor(np.zeros_like(x)), cn).data
    assert np.abs(g1 - (2.5 * g0 - 1.5 * gz)).max() > 0.1


def test_cn_two_value_example():
    x = Tensor(np.array([0.0, 2.0]).reshape(1, 2, 1, 1))
    np.testing.assert_array_equal(cn_forward(x, state("cn", 2, groups=1, eps=0.0)).data.ravel(), [-1.0, 1.0])


@given(st.integers(1, 3), st.sampled_from([(4, 1), (4, 2), (4, 4), (6, 3)]), st.integers(1, 4))
def test_cn_group_statistics(b, cg, hw):
    c, g = cg
    x = np.random.default_rng(b + c + hw).normal(1.0, 4.0, size=(b, c, hw, hw))
    if c // g * hw * hw < 2:
        return
    out = cn_forward(Tensor(x), state("cn", c, groups=g, eps=1e-12)).data.reshape(b, g, -1)
    assert np.abs(out.mean(axis=2)).max() < 1e-10
    assert np.abs(out.var(axis=2) - 1).max() < 1e-6


def test_ln_and_in_are_group_extremes(rng):
    x = rng.normal(size=(3, 8, 4, 4))
    np.testing.assert_allclose(cn_forward(Tensor(x), state("cn", 8, groups=1)).data, ln_reference(x, 1e-5),
                               atol=1e-12, rtol=0)
    np.testing.assert_allclose(cn_forward(Tensor(x), state("cn", 8, groups=8)).data, in_reference(x, 1e-5),
                               atol=1e-12, rtol=0)


def test_indivisible_groups_rejected():
    with pytest.raises(ValueError, match="groups"):
        NormState.create("cn", 6, groups=4)


def test_default_groups():
    assert default_groups(16) == 4
    assert default_groups(256) == 32
    assert default_groups(2) == 1


def test_fixed_stats_with_identity_stats_equals_bn(rng):
    x = rng.normal(size=(4, 3, 3, 3))
    f = state("fixed", 3)
    np.testing.assert_array_equal(fixed_stats_forward(Tensor(x), f).data, bn_forward(Tensor(x), state("bn", 3)).data)


def test_fixed_stats_shift(rng):
    x = rng.normal(size=(4, 3, 3, 3))
    f = state("fixed", 3)
    f.fixed_mu = np.full(3, 5.0)
    np.testing.assert_allclose(fixed_stats_forward(Tensor(x), f).data, bn_forward(Tensor(x), state("bn", 3)).data + 5)


def test_sample_fixed_stats_zero_spread_is_identity():
    mu, sd = sample_fixed_stats(7, 0.0, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(sd, 1.0)


def test_bcn_large_is_cn_of_bn(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    s = state("bcn_large", 4, groups=4, eps=1e-12)
    out = bcn_large_forward(Tensor(x), s).data
    ref = in_reference(bn_forward(Tensor(x), state("bn", 4, eps=1e-12)).data, 1e-12)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    per = out.reshape(2, 4, -1)
    assert np.abs(per.mean(axis=2)).max() < 1e-10 and np.abs(per.var(axis=2) - 1).max() < 1e-6


def test_bcn_micro_update_is_convex_combination():
    s = state("bcn_micro", 1, groups=1, rate=0.5)
    bcn_micro_forward(Tensor(np.full((1, 1, 2, 2), 2.0)), s)
    assert s.running_mean[0] == 1.0
    # second moment is centered on the previous estimate 0: mean((2-0)^2) = 4
    assert s.running_var[0] == pytest.approx(0.5 * 1 + 0.5 * 4.0)


def test_bcn_micro_conventional_centering_flag():
    s = state("bcn_micro", 1, groups=1, rate=0.5, center_on_batch_mean=True)
    bcn_micro_forward(Tensor(np.full((1, 1, 2, 2), 2.0)), s)
    assert s.running_var[0] == pytest.approx(0.5)


def test_bcn_micro_rate_zero_reduces_to_cn_of_affine(rng):
    x = rng.normal(2.0, 3.0, size=(1, 4, 3, 3))
    s = state("bcn_micro", 4, groups=2, rate=0.0)
    s.gamma.data = np.array([0.5, 2.0, 1.0, 3.0])
    s.beta.data = np.array([0.1, -0.2, 0.3, 0.0])
    out = bcn_micro_forward(Tensor(x), s).data
    np.testing.assert_array_equal(s.running_mean, 0.0)
    np.testing.assert_array_equal(s.running_var, 1.0)
    z = x / np.sqrt(1 + 1e-5) * s.gamma.data.reshape(1, 4, 1, 1) + s.beta.data.reshape(1, 4, 1, 1)
    ref = cn_forward(Tensor(z), state("cn", 4, groups=2)).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bcn_micro_uses_updated_estimates():
    s = state("bcn_micro", 1, groups=1, rate=1.0, eps=0.0)
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    bcn_micro_forward(Tensor(x), s)
    # rate 1 moves the mean estimate straight to the batch mean 2
    assert s.running_mean[0] == 2.0


@pytest.mark.parametrize("seed", range(3))
def test_bcn_micro_estimates_converge_on_stationary_stream(seed):
    rng = np.random.default_rng(seed)
    s = state("bcn_micro", 3, groups=1, rate=0.01)
    for _ in range(2000):
        bcn_micro_forward(Tensor(rng.normal(3.0, 2.0, size=(1, 3, 4, 4))), s)
    assert np.all(np.abs(s.running_mean - 3) < 0.2)
    assert np.all(np.abs(s.running_var - 4) < 0.5)


def test_norm_forward_none_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 2, 2, 2)))
    assert norm_forward(x, NormState.create(NormKind.NONE, 2)) is x
