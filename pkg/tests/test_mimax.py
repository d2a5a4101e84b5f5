from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbf.autodiff import Tensor, check_gradients
from dbf.errors import ContractError
from dbf.mimax import (
    NceBatch,
    Predictors,
    infonce_from_logits,
    infonce_loss,
    mi_lower_bound,
    mimax_total,
    pool,
    similarity,
    similarity_matrix,
)
from dbf.nn import MLP, component_rng


def brute_force_infonce(s, tau=1.0):
    total = 0.0
    for i in range(len(s)):
        denom = sum(math.exp(s[i][j] / tau) for j in range(len(s)))
        total += -math.log(math.exp(s[i][i] / tau) / denom)
    return total / len(s)


class Fixed(MLP):
    """A stand-in predictor that returns a fixed transform of its input."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x):
        return self.fn(x)


# pooling and similarity ------------------------------------------------


def test_pool_single_row():
    np.testing.assert_array_equal(pool(Tensor([[1.0, -2.0, 3.0]])).data, [1.0, -2.0, 3.0])


def test_pool_arithmetic_mean():
    np.testing.assert_array_equal(pool(Tensor([[1.0, 1.0], [3.0, 3.0]])).data, [2.0, 2.0])


def test_pool_matches_direct_summation(rng):
    x = rng.normal(size=(7, 16))
    ref = [sum(x[i][j] for i in range(7)) / 7 for j in range(16)]
    np.testing.assert_allclose(pool(Tensor(x)).data, ref, rtol=0, atol=1e-12)


def test_similarity_perfect_and_antipodal(rng):
    x = Tensor(rng.normal(size=6))
    assert similarity(x, Tensor(np.zeros(6)), Fixed(lambda z: x)).item() == pytest.approx(1.0, abs=1e-15)
    assert similarity(x, Tensor(np.zeros(6)), Fixed(lambda z: x * -1.0)).item() == pytest.approx(-1.0, abs=1e-15)


def test_similarity_matches_direct_cosine(rng):
    mlp = MLP(6, 6, 6, component_rng(0, "p"))
    x, z = rng.normal(size=6), rng.normal(size=6)
    fz = mlp(Tensor(z)).data
    ref = float(x @ fz / (np.linalg.norm(x) * np.linalg.norm(fz)))
    assert abs(similarity(Tensor(x), Tensor(z), mlp).item() - ref) < 1e-12


def test_similarity_matrix_rows_are_fusion_samples(rng):
    mlp = MLP(4, 4, 4, component_rng(1, "p"))
    x, z = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    s = similarity_matrix(Tensor(x), Tensor(z), mlp).data
    for i in range(3):
        for j in range(3):
            assert s[i, j] == pytest.approx(similarity(Tensor(x[j]), Tensor(z[i]), mlp).item(), abs=1e-14)


# InfoNCE ------------------------------------------------------------------


def test_uniform_logits_give_log_b():
    assert abs(infonce_from_logits(Tensor(np.full((4, 4), 0.3))).item() - math.log(4)) < 1e-12


def test_separable_limit_goes_to_zero():
    s = 2 * np.eye(5) - 1
    losses = [infonce_from_logits(Tensor(s), t).item() for t in (1.0, 0.1, 0.01)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-80


def test_matches_brute_force_cross_entropy(rng):
    s = np.tanh(rng.normal(size=(5, 5)))
    for tau in (1.0, 0.5):
        got = infonce_from_logits(Tensor(s), tau).item()
        assert abs(got - brute_force_infonce(s.tolist(), tau)) < 1e-12


def test_infonce_loss_uses_similarity_matrix(rng):
    preds = Predictors(("t",), 4, seed=2)
    z, x = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    batch = NceBatch(Tensor(z), {"t": Tensor(x)})
    s = similarity_matrix(Tensor(x), Tensor(z), preds["t"]).data
    assert abs(infonce_loss(batch, "t", preds).item() - brute_force_infonce(s.tolist())) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_loss_is_nonnegative(b, seed, tau):
    s = np.tanh(np.random.default_rng(seed).normal(size=(b, b)) * 3)
    assert infonce_from_logits(Tensor(s), tau).item() >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 8), st.integers(0, 2**31 - 1))
def test_negative_order_does_not_matter(b, seed):
    rng = np.random.default_rng(seed)
    s = np.tanh(rng.normal(size=(b, b)))
    perm = rng.permutation(b)
    a = infonce_from_logits(Tensor(s)).item()
    p = infonce_from_logits(Tensor(s[np.ix_(perm, perm)])).item()
    assert abs(a - p) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1), st.floats(1e-3, 1.0))
def test_raising_a_positive_lowers_the_loss(b, seed, delta):
    s = np.tanh(np.random.default_rng(seed).normal(size=(b, b)))
    bumped = s.copy()
    bumped[0, 0] += delta
    before = infonce_from_logits(Tensor(s)).item()
    after = infonce_from_logits(Tensor(bumped)).item()
    assert after < before
    assert mi_lower_bound(after, b) > mi_lower_bound(before, b)


def test_mi_lower_bound_bookkeeping():
    assert mi_lower_bound(math.log(4), 4) == 0.0
    assert mi_lower_bound(0.5, 8) == pytest.approx(math.log(8) - 0.5)


def test_batch_of_one_is_rejected():
    with pytest.raises(ContractError):
        NceBatch(Tensor(np.ones((1, 4))), {"t": Tensor(np.ones((1, 4)))})
    with pytest.raises(ContractError):
        infonce_from_logits(Tensor(np.ones((1, 1))))


def test_shape_mismatch_is_rejected():
    with pytest.raises(ContractError):
        NceBatch(Tensor(np.ones((3, 4))), {"v": Tensor(np.ones((3, 5)))})


# total ---------------------------------------------------------------------


def uniform_batch(rng, b=4, d=6):
    # Every modality vector is the same for all samples, so all s_ij in a row are equal.
    row = rng.normal(size=(1, d))
    x = {m: Tensor(np.repeat(row + k, b, axis=0)) for k, m in enumerate("tva")}
    return NceBatch(Tensor(rng.normal(size=(b, d)), requires_grad=True), x)


def test_alpha_zero_is_exactly_zero_and_detached(rng):
    preds = Predictors("tva", 6, seed=0)
    total = mimax_total(uniform_batch(rng), preds, alpha=0.0)
    assert total.item() == 0.0
    assert not total.requires_grad
    assert all(p.grad is None for p in preds.parameters().values())


def test_alpha_times_three_log4(rng):
    preds = Predictors("tva", 6, seed=0)
    total = mimax_total(uniform_batch(rng), preds, alpha=0.1).item()
    assert abs(total - 0.1 * 3 * math.log(4)) < 1e-12
    assert round(total, 4) == 0.4159


def test_doubling_alpha_doubles_total(rng):
    preds = Predictors("tva", 6, seed=0)
    batch = NceBatch(Tensor(rng.normal(size=(5, 6))),
                     {m: Tensor(rng.normal(size=(5, 6))) for m in "tva"})
    one = mimax_total(batch, preds, 0.05).item()
    two = mimax_total(batch, preds, 0.1).item()
    assert two == 2 * one


def test_negative_alpha_rejected(rng):
    with pytest.raises(ContractError):
        mimax_total(uniform_batch(rng), Predictors("t", 6), -0.1)


def test_predictor_gradients(rng):
    preds = Predictors("tva", 6, seed=3)
    batch = NceBatch(Tensor(rng.normal(size=(4, 6))),
                     {m: Tensor(rng.normal(size=(4, 6))) for m in "tva"})
    report = check_gradients(lambda: mimax_total(batch, preds, 0.1), preds.parameters())
    assert report.max_rel_error < 1e-4, report.worst()


def test_one_predictor_per_modality():
    preds = Predictors("tva", 4, seed=0)
    assert preds.modalities == ("t", "v", "a")
    w = {m: preds[m].fc1.weight.data for m in "tva"}
    assert not np.array_equal(w["t"], w["v"])
