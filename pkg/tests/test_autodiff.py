"""Tensor engine: op semantics, gradient fidelity, tape contracts."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from travseg import autodiff as ad
from travseg.autodiff import Tape, Tensor
from travseg.errors import ContractError, NumericError, ShapeError, ValidationError

from _opchecks import sweep


def t64(values):
    return ad.tensor(values, dtype=ad.FP64)


# -- construction and tape contracts --------------------------------------


def test_tensor_rejects_bad_dtype_and_shape():
    with pytest.raises(ValidationError):
        Tensor(np.zeros(3, dtype=np.int64))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0), dtype=np.float32))


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.tensor([1.0, np.nan])


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        ad.tensor([1.0, 2.0]).item()


def test_assign_preserves_shape_and_dtype():
    t = ad.tensor([1.0, 2.0])
    with pytest.raises(ShapeError):
        t.assign(np.zeros(3, dtype=ad.FP32))
    with pytest.raises(ShapeError):
        t.assign(np.zeros(2, dtype=ad.FP64))


def test_tapes_do_not_nest():
    with Tape():
        with pytest.raises(ContractError):
            with Tape():
                pass


def test_backward_requires_scalar_and_single_use():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)
        loss = ad.sum_all(y)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_outside_tape_is_an_error():
    x = ad.tensor(np.zeros(()), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x)


def test_grad_of_unused_leaf_stays_none():
    w = ad.tensor([3.0], requires_grad=True)
    x = ad.tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    tape.backward(loss)
    assert w.grad is None
    np.testing.assert_allclose(x.grad, [4.0], rtol=1e-6)


def test_quadratic_gradient():
    w = t64([3.0])
    w.requires_grad = True
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(w, w))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, [6.0], rtol=0, atol=1e-12)


# -- forward semantics -----------------------------------------------------


def test_matmul_identity_and_annihilator():
    eye = t64(np.eye(2))
    m = t64([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)
    np.testing.assert_array_equal(
        ad.matmul(t64([[1.0, 0.0], [0.0, 0.0]]), t64([[5.0], [7.0]])).data,
        [[5.0], [0.0]])
    z = ad.matmul(t64(np.zeros((3, 4))), t64(np.ones((4, 2))))
    assert not z.data.any() and z.shape == (3, 2)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(t64(np.ones(3)), t64(np.ones((3, 2))))


def test_dtype_mixing_is_rejected():
    with pytest.raises(ShapeError):
        ad.add(ad.tensor([1.0]), t64([1.0]))


def test_softmax_uniform_and_closed_form():
    np.testing.assert_allclose(
        ad.softmax_rows(t64([[0.0, 0.0, 0.0, 0.0]])).data, [[0.25] * 4],
        rtol=0, atol=1e-15)
    np.testing.assert_allclose(
        ad.softmax_rows(t64([[1000.0, 0.0]])).data, [[1.0, 0.0]],
        rtol=0, atol=1e-12)
    np.testing.assert_allclose(
        ad.softmax_rows(t64([[math.log(2.0), 0.0]])).data,
        [[2.0 / 3.0, 1.0 / 3.0]], rtol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e4))
def test_softmax_rows_stochastic(seed, scale):
    x = np.random.default_rng(seed).uniform(-scale, scale, (4, 6))
    y = ad.softmax_rows(t64(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-6)


def test_gelu_fixed_points():
    y = ad.gelu(t64([0.0, 10.0, -10.0])).data
    assert y[0] == 0.0
    np.testing.assert_allclose(y[1], 10.0, rtol=1e-9)
    np.testing.assert_allclose(y[2], 0.0, atol=1e-8)


def test_layer_norm_constant_row_maps_to_beta():
    x = t64([[5.0, 5.0, 5.0]])
    gamma = t64([2.0, 2.0, 2.0])
    beta = t64([1.0, -1.0, 0.0])
    np.testing.assert_allclose(ad.layer_norm(x, gamma, beta).data,
                               beta.data[None], rtol=0, atol=1e-12)


def test_cross_entropy_uniform_logits_is_ln2():
    logits = t64(np.zeros((2, 3, 4)))
    mask = np.zeros((3, 4), dtype=np.uint8)
    np.testing.assert_allclose(
        ad.cross_entropy_2class(logits, mask).item(), math.log(2.0),
        rtol=1e-12)


def test_cross_entropy_rejects_non_binary_target():
    logits = t64(np.zeros((2, 2, 2)))
    with pytest.raises(ValidationError):
        ad.cross_entropy_2class(logits, np.full((2, 2), 2))


@given(st.integers(0, 2**32 - 1))
def test_reshape_transpose_round_trip_exact(seed):
    x = np.random.default_rng(seed).normal(size=(3, 4, 5)).astype(np.float64)
    t = Tensor(x)
    back = ad.reshape(ad.reshape(t, (5, 12)), (3, 4, 5))
    np.testing.assert_array_equal(back.data, x)
    tt = ad.transpose(ad.transpose(t, (2, 0, 1)), (1, 2, 0))
    np.testing.assert_array_equal(tt.data, x)


def test_compose_axes_outer_sum():
    rows = t64([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    cols = t64([[0.1, 0.5], [0.2, 0.6]])
    y = ad.compose_axes(rows, cols)
    assert y.shape == (2, 3, 2)
    np.testing.assert_allclose(y.data[0], [[1.1, 1.2], [2.1, 2.2], [3.1, 3.2]],
                               rtol=0, atol=1e-15)


def test_concat_channels_needs_matching_tails():
    with pytest.raises(ShapeError):
        ad.concat_channels(t64(np.ones((2, 3))), t64(np.ones((2, 4))))
    with pytest.raises(ShapeError):
        ad.concat_channels(t64(np.ones((2, 3))))


def test_conv2d_validation():
    x = t64(np.ones((3, 5, 5)))
    with pytest.raises(ShapeError):  # even kernel
        ad.conv2d(x, t64(np.ones((2, 3, 2, 2))), t64(np.zeros(2)))
    with pytest.raises(ShapeError):  # channel mismatch
        ad.conv2d(x, t64(np.ones((2, 4, 3, 3))), t64(np.zeros(2)))
    with pytest.raises(ShapeError):  # bias arity
        ad.conv2d(x, t64(np.ones((2, 3, 3, 3))), t64(np.zeros(3)))


def test_conv2d_matches_direct_convolution(rng):
    x = rng.normal(size=(2, 6, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.empty((3, 6, 7))
    for co in range(3):
        for i in range(6):
            for j in range(7):
                ref[co, i, j] = (w[co] * xp[:, i:i + 3, j:j + 3]).sum() + b[co]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_bilinear_resize_identity_and_constant():
    x = t64(np.arange(12.0).reshape(1, 3, 4))
    np.testing.assert_array_equal(ad.bilinear_resize(x, 3, 4).data, x.data)
    c = ad.bilinear_resize(t64(np.full((2, 3, 3), 7.0)), 5, 9)
    np.testing.assert_allclose(c.data, 7.0, rtol=0, atol=1e-12)


def test_l2_normalize_rows_zero_row_maps_to_zero():
    y = ad.l2_normalize_rows(t64([[0.0, 0.0], [3.0, 4.0]])).data
    np.testing.assert_allclose(y[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(y[1], [0.6, 0.8], rtol=1e-9)


def test_rowmax_ties_route_to_first():
    x = t64([[2.0, 2.0, 1.0]])
    x.requires_grad = True
    with Tape() as tape:
        loss = ad.sum_all(ad.rowmax(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_finite_checks_toggle():
    big = ad.tensor([1e38], dtype=ad.FP32)
    with pytest.raises(NumericError):
        ad.mul(big, big)
    with ad.finite_checks(False):
        y = ad.mul(big, big)
        assert np.isinf(y.data).all()
    with pytest.raises(NumericError):
        ad.mul(big, big)


def test_determinism_bit_identical(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(5, 3)))
    a = ad.softmax_rows(ad.matmul(x, w)).data
    b = ad.softmax_rows(ad.matmul(x, w)).data
    assert a.tobytes() == b.tobytes()


# -- gradient fidelity -----------------------------------------------------


def test_every_op_gradchecks_over_seeds():
    sweep(range(5), threshold=1e-4)


def test_grad_check_sum_of_squares_is_tight():
    x = t64([1.0, -2.0, 3.0])
    err = ad.grad_check(lambda t: ad.sum_all(ad.mul(t, t)), x)
    assert err <= 1e-9


def test_grad_check_requires_scalar_output():
    with pytest.raises(ContractError):
        ad.grad_check(lambda t: ad.scale(t, 2.0), t64([1.0, 2.0]))


def test_matmul_chain_matches_finite_differences(rng):
    a = Tensor(rng.normal(size=(3, 3)))
    b = Tensor(rng.normal(size=(3, 2)))
    err = ad.grad_check(
        lambda x: ad.mean_all(ad.matmul(ad.matmul(x, a), b)),
        Tensor(rng.normal(size=(2, 3))))
    assert err <= 1e-4
