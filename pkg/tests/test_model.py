import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, random_params
from oracles import scalar_forward
from oiltta.core_math import DimensionError, DomainError, NumericError, finite_diff_grad, make_rng, rel_error
from oiltta.model import (
    ContractError,
    Instance,
    ModelParams,
    SpanDist,
    ema_blend,
    forward,
    load_checkpoint,
    predict_span,
    save_checkpoint,
    sgd_step,
    supervised_loss_grad,
)


def confident_params():
    """d=h=2 model whose heads put essentially all mass on a token equal to [10, 0]."""
    th = ModelParams.zeros(2, 2)
    th.W1[:] = np.eye(2)
    th.w_start[:] = [1000.0, 0.0]
    th.w_end[:] = [1000.0, 0.0]
    return th


def test_zero_params_give_uniform_heads(rng):
    inst = random_batch(rng, n=1, L=5, d=3)[0]
    dist = forward(ModelParams.zeros(3, 4), inst)
    np.testing.assert_allclose(dist.p_start, np.full(5, 0.2), atol=1e-15)
    np.testing.assert_allclose(dist.p_end, np.full(5, 0.2), atol=1e-15)


def test_position_permutation_equivariance(rng):
    th = random_params(rng)
    inst = random_batch(rng, n=1)[0]
    perm = rng.permutation(inst.L)
    a = forward(th, inst)
    b = forward(th, Instance(inst.tokens[perm]))
    np.testing.assert_allclose(b.p_start, a.p_start[perm], atol=1e-14)
    np.testing.assert_allclose(b.p_end, a.p_end[perm], atol=1e-14)


def test_forward_matches_scalar_oracle(rng):
    for _ in range(5):
        th = random_params(rng, d=5, h=6)
        inst = Instance(rng.normal(size=(4, 5)))
        ps, pe = scalar_forward(th, inst.tokens)
        dist = forward(th, inst)
        np.testing.assert_allclose(dist.p_start, ps, atol=1e-13)
        np.testing.assert_allclose(dist.p_end, pe, atol=1e-13)


def test_forward_is_deterministic(rng):
    th = random_params(rng)
    inst = random_batch(rng, n=1)[0]
    a, b = forward(th, inst), forward(th, inst)
    assert a.p_start.tobytes() == b.p_start.tobytes() and a.p_end.tobytes() == b.p_end.tobytes()


def test_forward_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        forward(random_params(rng, d=8), Instance(np.zeros((4, 3))))


def test_predict_span_examples():
    assert predict_span(SpanDist(np.array([.1, .8, .1]), np.array([.1, .1, .8]))) == (1, 2)
    assert predict_span(SpanDist(np.full(4, .25), np.full(4, .25))) == (0, 0)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.floats(0.1, 10.0))
def test_predict_span_invariant_under_monotone_rescaling(vals, c):
    p = np.array(vals) / sum(vals)
    dist = SpanDist(p, p[::-1].copy())
    scaled = SpanDist(np.log(p) * c + 3.0, np.exp(c * p[::-1]))
    assert predict_span(scaled) == predict_span(dist)


def test_no_start_before_end_constraint():
    assert predict_span(SpanDist(np.array([.1, .1, .8]), np.array([.8, .1, .1]))) == (2, 0)


def test_instance_rejects_bad_spans():
    for span in [(-1, 0), (2, 1), (0, 4)]:
        with pytest.raises(ContractError):
            Instance(np.zeros((4, 2)), span)


def test_supervised_confident_correct_has_zero_loss():
    tokens = np.zeros((4, 2))
    tokens[1] = [10.0, 0.0]
    loss, grad = supervised_loss_grad(confident_params(), [Instance(tokens, (1, 1))])
    assert loss == 0.0
    assert np.max(np.abs(grad)) < 1e-12


def test_supervised_grad_matches_finite_differences(rng):
    for _ in range(20):
        th = random_params(rng)
        batch = random_batch(rng)
        _, g = supervised_loss_grad(th, batch)
        num = finite_diff_grad(lambda v: supervised_loss_grad(th.with_flat(v), batch)[0], th.flatten(), 1e-6)
        assert rel_error(g, num) <= 1e-5


def test_supervised_duplicating_batch_is_noop(rng):
    th = random_params(rng)
    batch = random_batch(rng)
    l1, g1 = supervised_loss_grad(th, batch)
    l2, g2 = supervised_loss_grad(th, batch + batch)
    assert l2 == pytest.approx(l1, rel=1e-14)
    np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)


def test_supervised_needs_gold(rng):
    with pytest.raises(ContractError):
        supervised_loss_grad(random_params(rng), random_batch(rng, labelled=False))


def test_supervised_loss_value_is_mean_half_ce(rng):
    th = random_params(rng)
    batch = random_batch(rng)
    ref = 0.0
    for inst in batch:
        ps, pe = scalar_forward(th, inst.tokens)
        ref += 0.5 * (-math.log(ps[inst.gold_span[0]]) - math.log(pe[inst.gold_span[1]]))
    assert supervised_loss_grad(th, batch)[0] == pytest.approx(ref / len(batch), rel=1e-12)


def test_flatten_roundtrip(rng):
    th = random_params(rng, d=5, h=7)
    back = ModelParams.unflatten(th.flatten(), 5, 7)
    assert back.flatten().tobytes() == th.flatten().tobytes()
    assert th.size == 7 * 5 + 7 + 7 + 7 + 2


def test_copy_does_not_alias(rng):
    th = random_params(rng)
    c = th.copy()
    c.W1[0, 0] += 1.0
    assert c.W1[0, 0] != th.W1[0, 0]


def test_ema_examples(rng):
    te, tl = random_params(rng), random_params(rng)
    assert ema_blend(te, tl, 1.0).flatten().tobytes() == te.flatten().tobytes()
    assert ema_blend(te, tl, 0.0).flatten().tobytes() == tl.flatten().tobytes()
    a = ModelParams.unflatten(np.full(ModelParams.zeros(1, 1).size, 2.0), 1, 1)
    b = ModelParams.zeros(1, 1)
    np.testing.assert_array_equal(ema_blend(a, b, 0.5).flatten(), np.ones(a.size))


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_ema_alpha_domain(rng, alpha):
    th = random_params(rng)
    with pytest.raises(DomainError):
        ema_blend(th, th, alpha)


@settings(max_examples=50)
@given(st.floats(0.0, 1.0))
def test_ema_of_identical_params_is_identity(alpha):
    th = random_params(make_rng(0))
    np.testing.assert_allclose(ema_blend(th, th, alpha).flatten(), th.flatten(), rtol=1e-15, atol=0)


def test_sgd_examples(rng):
    th = random_params(rng)
    assert sgd_step(th, np.zeros(th.size), 0.3).flatten().tobytes() == th.flatten().tobytes()
    one = ModelParams.unflatten(np.ones(ModelParams.zeros(1, 1).size), 1, 1)
    np.testing.assert_array_equal(sgd_step(one, np.full(one.size, 2.0), 0.5).flatten(), np.zeros(one.size))


def test_sgd_linearity(rng):
    th = random_params(rng)
    g = rng.normal(size=th.size)
    twice = sgd_step(sgd_step(th, g, 0.05), g, 0.05)
    np.testing.assert_allclose(twice.flatten(), sgd_step(th, g, 0.1).flatten(), atol=1e-14)


def test_sgd_errors(rng):
    th = random_params(rng)
    with pytest.raises(NumericError):
        sgd_step(th, np.full(th.size, np.nan), 0.1)
    with pytest.raises(DimensionError):
        sgd_step(th, np.zeros(3), 0.1)
    with pytest.raises(DomainError):
        sgd_step(th, np.zeros(th.size), -1.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    th = random_params(rng, d=5, h=3)
    save_checkpoint(tmp_path / "m.ckpt", th, 11)
    back, L = load_checkpoint(tmp_path / "m.ckpt")
    assert L == 11 and (back.d, back.h) == (5, 3)
    assert back.flatten().tobytes() == th.flatten().tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x")
