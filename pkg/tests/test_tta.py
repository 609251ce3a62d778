import math
from dataclasses import replace

import numpy as np
import pytest

import oiltta.tta as tta
from conftest import random_batch, random_params
from oracles import oil_loss, pl_loss, tent_loss
from oiltta.core_math import finite_diff_grad, rel_error
from oiltta.experiment import build_schedule, load_config
from oiltta.model import Instance, ModelParams, forward, predict_span
from oiltta.streams import stream
from oiltta.tta import (
    AdaptConfig,
    ConfigError,
    MemoryBank,
    RegretUnavailable,
    adapt_step,
    expert_targets,
    filter_mask,
    init_adaptation,
    oil_loss_grad,
    oil_terms,
    pl_loss_grad,
    regret,
    tde_predict,
    tde_scores,
    tent_loss_grad,
)


def confident_params():
    th = ModelParams.zeros(2, 2)
    th.W1[:] = np.eye(2)
    th.w_start[:] = [1000.0, 0.0]
    th.w_end[:] = [1000.0, 0.0]
    return th


def confident_batch():
    tokens = np.zeros((4, 2))
    tokens[2] = [10.0, 0.0]
    return [Instance(tokens)]


def short_stream(steps=30, batch_size=8, seed=0, **seg):
    seg = {"kind": "corruption", "steps": steps, "eta": 0.1, "bias": 5.0, "bias_seed": 4, **seg}
    cfg = load_config({"schedule": [seg]})
    return list(stream(build_schedule(cfg), batch_size, seed))


# -- losses -------------------------------------------------------------------

def test_tent_examples():
    out = tent_loss_grad(confident_params(), confident_batch())
    assert out.loss == 0.0 and np.max(np.abs(out.grad)) < 1e-12
    batch = [Instance(np.ones((5, 3)))]
    assert tent_loss_grad(ModelParams.zeros(3, 4), batch).loss == pytest.approx(math.log(5), abs=1e-14)


def test_pl_examples():
    assert pl_loss_grad(confident_params(), confident_batch()).loss == 0.0
    batch = [Instance(np.ones((4, 3)))]
    assert pl_loss_grad(ModelParams.zeros(3, 4), batch).loss == pytest.approx(math.log(4), abs=1e-14)


def test_loss_values_match_scalar_oracles(rng):
    for _ in range(5):
        th, te = random_params(rng), random_params(rng)
        batch = random_batch(rng, labelled=False)
        assert tent_loss_grad(th, batch).loss == pytest.approx(tent_loss(th, batch), rel=1e-12)
        assert pl_loss_grad(th, batch).loss == pytest.approx(pl_loss(th, batch), rel=1e-12)
        for gamma in (math.inf, 1.0):
            for causal in (False, True):
                got = oil_loss_grad(th, te, batch, gamma, causal).loss
                assert got == pytest.approx(oil_loss(th, te, batch, gamma, causal), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("name", ["tent", "pl"])
def test_self_supervised_grads_match_finite_differences(rng, name):
    for _ in range(20):
        th = random_params(rng)
        batch = random_batch(rng, labelled=False)
        if name == "tent":
            g = tent_loss_grad(th, batch).grad
            f = lambda v: tent_loss_grad(th.with_flat(v), batch).loss  # noqa: E731
        else:
            labels = expert_targets(th, batch).labels
            g = pl_loss_grad(th, batch).grad
            f = lambda v: pl_loss_grad(th.with_flat(v), batch, labels).loss  # noqa: E731
        assert rel_error(g, finite_diff_grad(f, th.flatten(), 1e-6)) <= 1e-5


@pytest.mark.parametrize("causal", [False, True])
def test_oil_grad_matches_finite_differences(rng, causal):
    for _ in range(20):
        th = random_params(rng)
        te = th.with_flat(th.flatten() + 0.5 * rng.normal(size=th.size))
        batch = random_batch(rng, labelled=False)
        out = oil_loss_grad(th, te, batch, 2.0, causal)
        expert = expert_targets(te, batch)
        bias = tta.causal_bias(th, batch, expert, "prob") if causal else None
        f = lambda v: oil_terms(th.with_flat(v), batch, expert, out.mask, causal, bias=bias).loss  # noqa: E731
        assert rel_error(out.grad, finite_diff_grad(f, th.flatten(), 1e-6)) <= 1e-5


def test_oil_same_expert_equals_pl(rng):
    th = random_params(rng)
    batch = random_batch(rng, labelled=False)
    pl = pl_loss_grad(th, batch)
    for space in ("prob", "logit"):
        oil = oil_loss_grad(th, th, batch, math.inf, True, space)
        assert oil.loss == pytest.approx(pl.loss, rel=1e-14)
        np.testing.assert_allclose(oil.grad, pl.grad, rtol=1e-12, atol=1e-15)


def test_full_causal_gradient_doubles_pl(rng):
    # the non-detached variant differentiates p inside p - p_hat as well
    th = random_params(rng)
    batch = random_batch(rng, labelled=False)
    full = oil_loss_grad(th, th, batch, math.inf, True, "prob", "full")
    np.testing.assert_allclose(full.grad, 2 * pl_loss_grad(th, batch).grad, rtol=1e-12, atol=1e-15)


def test_gamma_zero_closes_filter(rng):
    th, te = random_params(rng), random_params(rng)
    out = oil_loss_grad(th, te, random_batch(rng, labelled=False), 0.0)
    assert not out.mask.any() and out.loss == 0.0 and not out.grad.any()


def test_filter_monotone_in_gamma(rng):
    th, te = random_params(rng), random_params(rng)
    batch = random_batch(rng, n=16, labelled=False)
    labels = expert_targets(te, batch).labels
    counts = [int(filter_mask(th, batch, labels, g).sum()) for g in (0, 0.1, 0.5, 1, 2, 5, math.inf)]
    assert counts == sorted(counts)
    assert counts[0] == 0 and counts[-1] == 32


def test_causal_floor_keeps_loss_finite():
    # expert far more confident than the learner makes 2p - p_hat negative at the label
    learner = ModelParams.zeros(2, 2)
    out = oil_loss_grad(learner, confident_params(), confident_batch(), math.inf, True)
    assert out.loss == pytest.approx(-math.log(1e-12))
    assert not out.grad.any()


# -- inference ----------------------------------------------------------------

def test_tde_arithmetic():
    q = tde_scores(np.array([.6, .4]), np.array([.9, .1]), 0.0)
    np.testing.assert_allclose(q, [.3, .7], atol=1e-15)
    assert int(np.argmax(q)) == 1


def test_tde_beta_one_is_argmax_p(rng):
    for _ in range(20):
        th, te = random_params(rng), random_params(rng)
        inst = random_batch(rng, n=1, labelled=False)[0]
        pred, _ = tde_predict(th, te, inst, 1.0)
        assert pred == predict_span(forward(th, inst))


def test_tde_same_models_give_p_for_any_beta(rng):
    th = random_params(rng)
    inst = random_batch(rng, n=1, labelled=False)[0]
    dist = forward(th, inst)
    for beta in (0.0, 0.3, 1.0):
        _, q = tde_predict(th, th, inst, beta)
        np.testing.assert_array_equal(q.p_start, dist.p_start)
        np.testing.assert_array_equal(q.p_end, dist.p_end)


def test_tde_rejects_bad_beta(rng):
    th = random_params(rng)
    with pytest.raises(ConfigError):
        tde_predict(th, th, random_batch(rng, n=1)[0], 1.5)


# -- config -------------------------------------------------------------------

def test_inactive_hyperparameters_reported():
    assert AdaptConfig(method="oil").inactive() == []
    for m in ("tent", "pl"):
        assert set(AdaptConfig(method=m).to_dict()["inactive"]) >= {"alpha", "gamma", "beta"}


@pytest.mark.parametrize("bad", [dict(method="sgd"), dict(K=0), dict(alpha=1.1), dict(beta=-0.1),
                                 dict(gamma=-1.0), dict(lr=float("nan")), dict(causal_space="z")])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        init_adaptation(ModelParams.zeros(2, 2), AdaptConfig(**bad))


# -- engine -------------------------------------------------------------------

def test_init_copies_source(trained):
    state = init_adaptation(trained.theta, AdaptConfig(method="oil"))
    src = trained.theta.flatten().tobytes()
    assert state.learner.flatten().tobytes() == src == state.expert.flatten().tobytes()
    assert state.learner.W1 is not trained.theta.W1 and state.expert.W1 is not state.learner.W1


def test_memory_bank_fifo():
    bank = MemoryBank(3)
    for t in range(1, 8):
        bank.push(t)
        assert list(bank) == list(range(max(1, t - 2), t + 1))


@pytest.mark.parametrize("K", [1, 3])
def test_updates_per_step(trained, K):
    state = init_adaptation(trained.theta, AdaptConfig(method="pl", lr=0.5, K=K))
    recs = [adapt_step(state, b) for b in short_stream(6)]
    assert [r.n_updates for r in recs] == [min(t, K) for t in range(1, 7)]


def test_lr_zero_keeps_source_predictions(trained):
    state = init_adaptation(trained.theta, AdaptConfig(method="oil", lr=0.0, alpha=0.5))
    for b in short_stream(10):
        rec = adapt_step(state, b)
        assert rec.predictions == [predict_span(forward(trained.theta, x)) for x in b.instances]
    assert state.learner.flatten().tobytes() == trained.theta.flatten().tobytes()


def test_same_seed_same_trajectory(trained):
    out = []
    for _ in range(2):
        state = init_adaptation(trained.theta, AdaptConfig(method="oil", lr=0.5, seed=3))
        for b in short_stream(10, seed=3):
            adapt_step(state, b)
        out.append(state.learner.flatten().tobytes())
    assert out[0] == out[1]


def test_expert_step_bound(trained):
    cfg = AdaptConfig(method="oil", lr=0.5, alpha=0.9, K=1)
    state = init_adaptation(trained.theta, cfg)
    for b in short_stream(10):
        before = state.expert.flatten()
        adapt_step(state, b)
        learner, after = state.learner.flatten(), state.expert.flatten()
        assert np.max(np.abs(after - before)) <= (1 - cfg.alpha) * np.max(np.abs(learner - before)) + 1e-15


def test_non_finite_step_is_aborted_and_stream_continues(trained, monkeypatch):
    state = init_adaptation(trained.theta, AdaptConfig(method="pl", lr=0.5))
    batches = short_stream(3)
    adapt_step(state, batches[0])
    saved = state.learner.flatten().copy()
    real = tta.online_loss

    def broken(cfg, theta, batch, expert=None):
        out = real(cfg, theta, batch, expert)
        return tta.LossOut(math.nan, out.grad, out.head_losses)

    monkeypatch.setattr(tta, "online_loss", broken)
    rec = adapt_step(state, batches[1])
    assert rec.aborted and rec.error and rec.n_updates == 0
    assert state.learner.flatten().tobytes() == saved.tobytes()
    monkeypatch.setattr(tta, "online_loss", real)
    assert not adapt_step(state, batches[2]).aborted


def test_predictions_are_labels_free(trained):
    b = short_stream(1)[0]
    assert all(x.gold_span is None for x in b.unlabeled())
    assert all(x.gold_span is not None for x in b.instances)


def test_regret_trivial_cases(trained):
    cfg = AdaptConfig(method="oil", lr=0.5, snapshots=True)
    state = init_adaptation(trained.theta, cfg)
    adapt_step(state, short_stream(1)[0])
    assert regret(state.snapshots, cfg) == (0.0, 0)

    cfg0 = replace(cfg, lr=0.0)
    state = init_adaptation(trained.theta, cfg0)
    for b in short_stream(5):
        adapt_step(state, b)
    assert regret(state.snapshots, cfg0)[0] == 0.0


def test_regret_unavailable(trained):
    state = init_adaptation(trained.theta, AdaptConfig(method="pl"))
    adapt_step(state, short_stream(1)[0])
    with pytest.raises(RegretUnavailable):
        regret(state.snapshots, state.cfg)
    cfg = AdaptConfig(method="pl", snapshots=True, snapshot_cap=2)
    state = init_adaptation(trained.theta, cfg)
    for b in short_stream(3):
        adapt_step(state, b)
    with pytest.raises(RegretUnavailable):
        regret(state.snapshots, cfg)


def test_adam_optimizer_runs(trained):
    state = init_adaptation(trained.theta, AdaptConfig(method="oil", lr=1e-3, optimizer="adam"))
    recs = [adapt_step(state, b) for b in short_stream(5)]
    assert not any(r.aborted for r in recs)
    assert state.learner.flatten().tobytes() != trained.theta.flatten().tobytes()
