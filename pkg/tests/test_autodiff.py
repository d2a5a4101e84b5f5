from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbf import autodiff as ad
from dbf.autodiff import Tensor, check_gradients, no_grad
from dbf.errors import (
    ContractError,
    DegenerateInputError,
    MaskError,
    NonFiniteError,
    ShapeError,
)


def param(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


# matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_gradients_match_finite_differences(rng):
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    r = rng.normal(size=(3, 2))
    report = check_gradients(lambda: (ad.matmul(a, b) * r).sum(), {"a": a, "b": b})
    assert report.max_rel_error < 1e-4
    assert report.n_checked == 12 + 8


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


def test_batched_matmul_against_weight_matrix_gradients(rng):
    a, b = param(rng.normal(size=(2, 3, 4))), param(rng.normal(size=(4, 5)))
    r = rng.normal(size=(2, 3, 5))
    report = check_gradients(lambda: (ad.matmul(a, b) * r).sum(), {"a": a, "b": b})
    assert report.max_rel_error < 1e-6


# softmax ----------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_array_equal(ad.softmax_masked(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_masked_exclusion():
    out = ad.softmax_masked(Tensor([5.0, 5.0, 5.0]), [True, True, False])
    np.testing.assert_array_equal(out.data, [0.5, 0.5, 0.0])


def test_softmax_matches_direct_summation():
    x = [1.0, 2.0, 3.0]
    e = [math.exp(v) for v in x]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(ad.softmax_masked(Tensor(x)).data, expected, rtol=0, atol=1e-12)


def test_softmax_fully_masked_row_raises():
    logits = Tensor(np.zeros((2, 3)))
    mask = np.array([[True, False, False], [False, False, False]])
    with pytest.raises(MaskError):
        ad.softmax_masked(logits, mask)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_normalized_and_masked_entries_exactly_zero(n, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=(3, n))
    mask = rng.random((3, n)) < 0.6
    mask[np.arange(3), rng.integers(0, n, size=3)] = True
    out = ad.softmax_masked(Tensor(logits), mask).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out[~mask] == 0.0)
    assert np.all((out >= 0) & (out <= 1))


def test_large_logits_do_not_overflow():
    out = ad.softmax_masked(Tensor([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0], atol=1e-15)


# layer norm -------------------------------------------------------------


def test_layer_norm_constant_row():
    out = ad.layer_norm(Tensor([[2.5, 2.5, 2.5]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_already_normalized():
    out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-300)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=0, atol=1e-15)


def test_layer_norm_output_statistics(rng):
    row = rng.normal(loc=3.0, scale=2.0, size=17)
    out = ad.layer_norm(Tensor(row), Tensor(np.ones(17)), Tensor(np.zeros(17)), eps=1e-15).data
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-9


def test_layer_norm_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# l2 normalize -----------------------------------------------------------


def test_l2_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_unit_vector_is_fixed(rng):
    v = rng.normal(size=9)
    v /= np.linalg.norm(v)
    np.testing.assert_allclose(ad.l2_normalize(Tensor(v)).data, v, rtol=0, atol=1e-15)


def test_l2_normalize_random_norm_is_one(rng):
    out = ad.l2_normalize(Tensor(rng.normal(size=16))).data
    assert abs(math.sqrt(float(out @ out)) - 1.0) < 1e-12


def test_l2_normalize_near_zero_raises():
    with pytest.raises(DegenerateInputError):
        ad.l2_normalize(Tensor([1e-13, 0.0]))


# backward ---------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    w = param(rng.normal(size=(3, 2)))
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones((3, 2)))


def test_backward_half_square_gives_w(rng):
    w = param(rng.normal(size=5))
    ((w * w).sum() * 0.5).backward()
    np.testing.assert_allclose(w.grad, w.data, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    w = param([1.0, 2.0])
    with pytest.raises(ContractError):
        (w * 2.0).backward()


def test_backward_accumulates_over_shared_inputs():
    w = param([1.0, 2.0])
    (w * w + w).sum().backward()
    np.testing.assert_array_equal(w.grad, [3.0, 5.0])


def test_backward_leaves_unreached_parameters_untouched():
    w, unused = param([1.0]), param([2.0])
    (w * 3.0).sum().backward()
    assert unused.grad is None


def test_backward_is_bitwise_deterministic(rng):
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))

    def run():
        x, y = param(a), param(b)
        out = ad.softmax_masked(ad.matmul(x, y))
        ad.logsumexp(ad.gelu(out) * 3.0).sum().backward()
        return x.grad.tobytes(), y.grad.tobytes()

    assert run() == run()


def test_no_grad_records_nothing():
    w = param([1.0, 2.0])
    with no_grad():
        out = (w * w).sum()
    assert not out.requires_grad
    assert ad.grad_enabled()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_is_an_error_naming_the_op():
    with pytest.raises(NonFiniteError, match="log"):
        ad.log(Tensor([-1.0]))


def test_check_gradients_rejects_bad_step():
    w = param([1.0])
    for h in (0.0, -1e-5, 1e-2):
        with pytest.raises(ContractError):
            check_gradients(lambda: (w * w).sum(), {"w": w}, h=h)


def test_check_gradients_linear_regression_toy(rng):
    x = rng.normal(size=(20, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.1 * rng.normal(size=20)
    w, b = param(rng.normal(size=(3, 1))), param([0.0])

    def loss():
        resid = ad.matmul(Tensor(x), w).reshape(20) + b - y
        return (resid * resid).mean()

    assert check_gradients(loss, {"w": w, "b": b}).max_rel_error < 1e-6


def test_check_gradients_restores_parameters(rng):
    w = param(rng.normal(size=4))
    before = w.data.copy()
    check_gradients(lambda: ad.exp(w).sum(), {"w": w})
    np.testing.assert_array_equal(w.data, before)


# per-op gradient properties ----------------------------------------------


def _pos(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape)


# name -> (input builders, function of the parameter tensors)
OPS = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a + b),
    "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))], lambda a, b: a - b),
    "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a * b),
    "div": (lambda r: [r.normal(size=(3, 4)), _pos(r, (4,))], lambda a, b: a / b),
    "power": (lambda r: [_pos(r, (3, 4))], lambda a: a ** 2.5),
    "exp": (lambda r: [r.normal(size=(5,))], ad.exp),
    "log": (lambda r: [_pos(r, (5,))], ad.log),
    "abs": (lambda r: [r.choice([-1, 1], size=5) * _pos(r, (5,))], ad.tabs),
    "gelu": (lambda r: [r.normal(size=(2, 5))], ad.gelu),
    "sum_axis": (lambda r: [r.normal(size=(3, 4))], lambda a: a.sum(axis=0)),
    "mean_axis": (lambda r: [r.normal(size=(3, 4))], lambda a: a.mean(axis=-1, keepdims=True)),
    "reshape": (lambda r: [r.normal(size=(3, 4))], lambda a: a.reshape(2, 6)),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: a.transpose(2, 0, 1)),
    "getitem_slice": (lambda r: [r.normal(size=(5, 4))], lambda a: a[1:4, ::2]),
    "getitem_fancy": (lambda r: [r.normal(size=(5, 4))], lambda a: a[np.array([0, 2, 2, 4])]),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(4, 3))],
               lambda a, b: ad.concat([a, b], axis=0)),
    "stack": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))],
              lambda a, b: ad.stack([a, b], axis=1)),
    "broadcast_to": (lambda r: [r.normal(size=(1, 3))], lambda a: ad.broadcast_to(a, (4, 3))),
    "matmul_batched": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))], ad.matmul),
    "affine": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))],
               ad.affine),
    "affine_nobias": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], ad.affine),
    "softmax": (lambda r: [r.normal(size=(3, 5))], ad.softmax_masked),
    "softmax_masked": (lambda r: [r.normal(size=(2, 4))],
                       lambda a: ad.softmax_masked(a, [[True, False, True, True],
                                                       [False, True, True, False]])),
    "logsumexp": (lambda r: [r.normal(size=(3, 5))], lambda a: ad.logsumexp(a, axis=-1)),
    "layer_norm": (lambda r: [r.normal(size=(3, 6)), _pos(r, (6,)), r.normal(size=(6,))],
                   ad.layer_norm),
    "l2_normalize": (lambda r: [r.normal(size=(3, 6))], ad.l2_normalize),
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, seed):
    build, fn = OPS[name]
    rng = np.random.default_rng([seed, len(name)])
    params = {f"x{i}": param(a) for i, a in enumerate(build(rng))}
    out_shape = fn(*params.values()).shape
    weights = rng.normal(size=out_shape)
    report = check_gradients(lambda: (fn(*params.values()) * weights).sum(), params)
    assert report.max_rel_error < 1e-4, report.worst()
