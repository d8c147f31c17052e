import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wsnorm.reparam import (cwn_forward, default_ws_eps, pgd_step, reparameterize, standardize_rows,
                            ws_backward_analytic, ws_forward, ws_parts, wn_forward)
from wsnorm.tensor import Tensor, verification_mode

rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(3, 12)),
              elements=st.floats(-5, 5, allow_nan=False)).filter(
    lambda a: np.all(a.std(axis=1) > 1e-2))
# rows of unit scale, where the eps correction stays far below 1e-6
unit_rows = rows.filter(lambda a: np.all(a.std(axis=1) > 0.3))


def test_ws_hand_example():
    out = ws_forward(Tensor(np.array([[1.0, 2.0, 3.0]])), 0.0).data
    np.testing.assert_allclose(out, [[-np.sqrt(1.5), 0.0, np.sqrt(1.5)]], rtol=1e-15)
    assert abs(out.sum()) < 1e-15
    assert (out ** 2).sum() == pytest.approx(3.0, rel=1e-15)


def test_ws_constant_row_is_zero():
    np.testing.assert_array_equal(ws_forward(Tensor(np.full((1, 5), 7.0)), 1e-10).data, 0.0)


def test_ws_needs_two_entries_per_row():
    with pytest.raises(ValueError, match="I=1"):
        ws_forward(Tensor(np.ones((3, 1))), 1e-10)


def test_default_eps_by_precision():
    assert default_ws_eps(np.float64) == 1e-10
    assert default_ws_eps(np.float32) == 1e-5


@given(unit_rows, st.floats(-10, 10), st.floats(0.2, 10))
def test_ws_shift_and_scale_invariant(w, shift, scale):
    base = ws_forward(Tensor(w), 1e-10).data
    moved = ws_forward(Tensor(w * scale + shift), 1e-10).data
    np.testing.assert_allclose(moved, base, atol=1e-6)


@given(rows)
def test_ws_rows_zero_mean_and_bounded_variance(w):
    out = ws_parts(Tensor(w), 1e-10)
    n = w.shape[1]
    assert np.abs(out.standardized.data.sum(axis=1)).max() < 1e-10
    var = (out.standardized.data ** 2).mean(axis=1)
    lower = 1 - 1e-10 / (out.row_std ** 2 - 1e-10).min() - 1e-9
    assert np.all(var <= 1 + 1e-12) and np.all(var >= lower)
    assert np.all(out.row_std >= np.sqrt(1e-10))
    assert n == out.fan_in


def test_analytic_gradient_two_element_row():
    # W = [1, 3]: w_hat = [-1, 1], sigma = 1. The first step gives
    # [a, b] - (b - a)/2 * [-1, 1] = [(a + b)/2, (a + b)/2]; removing the row
    # mean leaves zero for every upstream gradient.
    w_hat, sigma = np.array([[-1.0, 1.0]]), np.array([1.0])
    for a, b in [(1.0, 0.0), (0.3, -2.0), (5.0, 5.0)]:
        np.testing.assert_allclose(ws_backward_analytic(w_hat, np.array([[a, b]]), sigma), 0.0, atol=1e-15)
    # autodiff agrees: a standardized 2-vector is locally constant
    w = Tensor(np.array([[1.0, 3.0]]), requires_grad=True)
    (ws_forward(w, 0.0) * Tensor(np.array([[0.3, -2.0]]))).sum().backward()
    np.testing.assert_allclose(w.grad, 0.0, atol=1e-15)


def test_analytic_gradient_zero_upstream():
    w_hat = standardize_rows(np.random.default_rng(0).normal(size=(3, 5)))
    np.testing.assert_array_equal(ws_backward_analytic(w_hat, np.zeros((3, 5)), np.ones(3)), 0.0)


def test_analytic_gradient_matches_autodiff_seed11():
    rng = np.random.default_rng(11)
    raw, g = rng.normal(size=(4, 27)), rng.normal(size=(4, 27))
    with verification_mode():
        w = Tensor(raw, requires_grad=True)
        parts = ws_parts(w, 1e-10)
        (parts.standardized * Tensor(g)).sum().backward()
    analytic = ws_backward_analytic(parts.standardized.data, g, parts.row_std)
    assert np.abs(analytic - w.grad).max() / np.abs(w.grad).max() < 1e-10


def test_analytic_gradient_shape_errors():
    with pytest.raises(ValueError, match="shape"):
        ws_backward_analytic(np.zeros((2, 3)), np.zeros((2, 4)), np.ones(2))


def test_wn_examples():
    np.testing.assert_allclose(wn_forward(Tensor(np.array([[3.0, 4.0]])), np.array([1.0])).data, [[0.6, 0.8]])
    np.testing.assert_allclose(wn_forward(Tensor(np.array([[3.0, 4.0]])), np.array([10.0])).data, [[6.0, 8.0]])
    with pytest.raises(ValueError, match="zero row"):
        wn_forward(Tensor(np.zeros((1, 3))), np.array([1.0]))


@given(rows)
def test_wn_row_norm_is_gain(w):
    g = np.linspace(0.5, 2.0, w.shape[0])
    out = wn_forward(Tensor(w), g).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), g, rtol=1e-12)


def test_cwn_examples():
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(cwn_forward(Tensor(np.array([[1.0, 3.0]])), np.array([1.0])).data, [[-s, s]])
    with pytest.raises(ValueError, match="constant row"):
        cwn_forward(Tensor(np.full((1, 4), 2.0)), np.array([1.0]))


@given(rows)
def test_cwn_with_sqrt_fan_in_gain_equals_ws(w):
    n = w.shape[1]
    cwn = cwn_forward(Tensor(w), np.full(w.shape[0], np.sqrt(n))).data
    np.testing.assert_allclose(cwn.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(cwn, ws_forward(Tensor(w), 1e-10).data, atol=1e-6)


def test_reparameterize_keeps_conv_shape():
    raw = Tensor(np.random.default_rng(2).normal(size=(4, 3, 3, 3)))
    for kind, gain in [("none", None), ("ws", None), ("wn", np.ones(4)), ("cwn", np.ones(4))]:
        assert reparameterize(raw, kind, 1e-10, gain).shape == (4, 3, 3, 3)


def _constrained(seed, o=3, n=10):
    return standardize_rows(np.random.default_rng(seed).normal(size=(o, n)))


@pytest.mark.parametrize("variant", ["exact_project", "lagrangian"])
def test_pgd_zero_gradient_is_fixed_point(variant):
    w = _constrained(0)
    np.testing.assert_allclose(pgd_step(w, np.zeros_like(w), 0.1, variant), w, atol=1e-15)


def test_pgd_exact_projection_satisfies_constraints():
    w = _constrained(1)
    out = pgd_step(w, np.random.default_rng(2).normal(size=w.shape), 0.3, "exact_project")
    np.testing.assert_allclose(out.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose((out ** 2).sum(axis=1), w.shape[1], rtol=1e-13)


def test_pgd_variants_agree_to_second_order():
    w, g = _constrained(3), np.random.default_rng(4).normal(size=(3, 10))
    gaps = []
    for lr in (1e-2, 5e-3, 2.5e-3):
        gaps.append(np.abs(pgd_step(w, g, lr, "exact_project") - pgd_step(w, g, lr, "lagrangian")).max())
    ratios = [gaps[i] / gaps[i + 1] for i in range(2)]
    np.testing.assert_allclose(ratios, 4.0, rtol=0.05)


def test_pgd_rejects_unconstrained_input():
    with pytest.raises(ValueError, match="constraints"):
        pgd_step(np.ones((2, 4)), np.zeros((2, 4)), 0.1)
