import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_selectors, small_config, small_suite, tiny_config, tiny_context, tiny_domains
from selmag import tensor as tn
from selmag.distill import kd_loss, pseudo_labels
from selmag.meta import (THETA_KEYS, adaptation_loss, build_context, final_adapt, forward, initial_hypothesis,
                         inner_adapt, inner_gradients, meta_gradient, meta_train, outer_step, plateaued,
                         sample_episode, selection_weights, target_context, theta_of)
from selmag.optim import Adam
from selmag.ot import selot_loss
from selmag.pipeline import pretrain
from selmag.tensor import relative_error


def setup(seed=0, **cfg):
    ds, pre, ctx = tiny_context(seed)
    theta0 = theta_of(initial_hypothesis(pre, ctx.source_indices))
    return ds, pre, ctx, theta0, tiny_config(**cfg), random_selectors(seed=seed)


def fd_meta_gradient(sel, ctx, theta0, cfg, h=1e-5):
    out = {}
    for k, v in sel.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            p = {kk: vv.copy() for kk, vv in sel.items()}
            p[k][idx] += h
            up = meta_gradient(p, ctx, theta0, cfg)[0]
            p[k][idx] -= 2 * h
            down = meta_gradient(p, ctx, theta0, cfg)[0]
            g[idx] = (up - down) / (2 * h)
        out[k] = g
    return out


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def test_two_sources_force_the_complement():
    ds = tiny_domains(2)
    ep = sample_episode(ds, np.random.default_rng(0))
    assert ep.source_indices == (1 - ep.target_index,)
    assert ep.pseudo_sources[0] is ds.sources[1 - ep.target_index]


def test_episode_frequencies_are_uniform():
    ds = tiny_domains(5, n=4)
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_episode(ds, rng).target_index for _ in range(1000)], minlength=5)
    assert np.all(np.abs(counts / 1000 - 0.2) <= 0.05)


def test_episodes_are_deterministic():
    ds = tiny_domains(4, n=4)
    a, b = np.random.default_rng(3), np.random.default_rng(3)
    assert [sample_episode(ds, a).target_index for _ in range(20)] == \
           [sample_episode(ds, b).target_index for _ in range(20)]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 6))
def test_episode_roles_partition_the_sources(seed, k):
    ds = tiny_domains(k, n=4)
    ep = sample_episode(ds, np.random.default_rng(seed))
    assert ep.target_index not in ep.source_indices
    assert sorted((ep.target_index, *ep.source_indices)) == list(range(k))


def test_single_source_cannot_make_episodes():
    with pytest.raises(ValueError):
        sample_episode(tiny_domains(1), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# adaptation loss and its explicit gradient
# ---------------------------------------------------------------------------

def loss_parts(theta0, ctx, sel, cfg):
    theta = {k: tn.const(v) for k, v in theta0.items()}
    s_global, s_local, _ = selection_weights(sel, ctx, cfg)
    _, _, x, probs = forward(theta, ctx.graph)
    ot = selot_loss(ctx.xs_list, x, s_global, s_local, cfg.epsilon, cfg.sinkhorn_tol,
                    cfg.sinkhorn_max_iter, scale=ctx.scale).item()
    kd = kd_loss(probs, pseudo_labels(ctx.predictions, s_global)).item()
    return ot, kd


def test_blend_endpoints_and_midpoint():
    _, _, ctx, theta0, cfg, sel = setup()
    ot, kd = loss_parts(theta0, ctx, sel, cfg)
    theta = {k: tn.const(v) for k, v in theta0.items()}
    assert adaptation_loss(theta, ctx, sel, cfg.update(lam=1.0)).item() == ot
    assert adaptation_loss(theta, ctx, sel, cfg.update(lam=0.0)).item() == kd
    assert np.isclose(adaptation_loss(theta, ctx, sel, cfg).item(), 0.3 * ot + 0.7 * kd, rtol=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_inner_gradients_match_tape_backward(lam):
    _, _, ctx, theta0, cfg, sel = setup(1, lam=lam)
    theta = {k: tn.param(v) for k, v in theta0.items()}
    loss = adaptation_loss(theta, ctx, sel, cfg)
    store = tn.backward(loss)
    s_global, _, w = selection_weights(sel, ctx, cfg)
    ybar = pseudo_labels(ctx.predictions, s_global) if lam < 1 else None
    grads, value = inner_gradients({k: tn.const(v) for k, v in theta0.items()}, ctx, w, ybar, cfg)
    assert np.isclose(value, loss.item(), rtol=1e-10)
    for k in THETA_KEYS:
        assert relative_error(grads[k].value, store[theta[k]]) < 1e-8, k


def test_zero_steps_and_zero_step_size_leave_parameters():
    _, _, ctx, theta0, cfg, sel = setup()
    for steps, c in ((0, cfg), (3, cfg.update(inner_lr=0.0))):
        theta, _ = inner_adapt(theta0, ctx, sel, c, steps=steps)
        for k in THETA_KEYS:
            assert np.array_equal(theta[k].value, theta0[k])


def test_inner_adapt_lowers_the_adaptation_loss():
    _, _, ctx, theta0, cfg, sel = setup()
    _, losses = inner_adapt(theta0, ctx, sel, cfg, steps=20)
    assert losses[-1] < losses[0]


def test_negative_steps_rejected():
    _, _, ctx, theta0, cfg, sel = setup()
    with pytest.raises(ValueError):
        inner_adapt(theta0, ctx, sel, cfg, steps=-1)


# ---------------------------------------------------------------------------
# meta-gradient
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1])
def test_meta_gradient_matches_finite_differences(seed):
    _, _, ctx, theta0, cfg, sel = setup(seed)
    _, g = meta_gradient(sel, ctx, theta0, cfg)
    num = fd_meta_gradient(sel, ctx, theta0, cfg)
    a = np.concatenate([g[k].ravel() for k in sel])
    b = np.concatenate([num[k].ravel() for k in sel])
    assert np.abs(b).max() > 1e-6
    assert relative_error(a, b) < 1e-2


def test_envelope_meta_gradient_is_only_approximate():
    """Holding the plan fixed still gives a descent-correlated gradient."""
    _, _, ctx, theta0, cfg, sel = setup(0)
    _, exact = meta_gradient(sel, ctx, theta0, cfg)
    _, approx = meta_gradient(sel, ctx, theta0, cfg.update(plan_grad="envelope"))
    a = np.concatenate([exact[k].ravel() for k in sel])
    b = np.concatenate([approx[k].ravel() for k in sel])
    assert a @ b > 0


def test_zero_inner_steps_give_exactly_zero_meta_gradient():
    _, _, ctx, theta0, cfg, sel = setup(0, inner_steps=0)
    _, g = meta_gradient(sel, ctx, theta0, cfg)
    assert all(not v.any() for v in g.values())


def test_zero_outer_lr_keeps_selectors():
    _, _, ctx, theta0, cfg, sel = setup(0)
    before = {k: v.copy() for k, v in sel.items()}
    outer_step(sel, Adam(sel, lr=0.0), ctx, theta0, cfg)
    assert all(np.array_equal(sel[k], before[k]) for k in sel)


def test_outer_step_moves_selectors():
    _, _, ctx, theta0, cfg, sel = setup(0)
    before = {k: v.copy() for k, v in sel.items()}
    outer_step(sel, Adam(sel, lr=1e-3), ctx, theta0, cfg)
    assert any(not np.array_equal(sel[k], before[k]) for k in sel)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_plateau_rule():
    assert not plateaued([1.0] * 3, 2, 1e-3)
    assert plateaued([1.0] * 4, 2, 1e-3)
    assert not plateaued([4.0, 4.0, 1.0, 1.0], 2, 1e-3)
    assert not plateaued([1.0] * 10, 0, 1e-3)


@pytest.fixture(scope="module")
def fixture_run():
    ds, _ = small_suite(0)
    cfg = small_config(0)
    pre = pretrain(ds, cfg).pretrained(ds)
    return ds, pre, cfg


def test_zero_epochs_return_init(fixture_run):
    ds, pre, cfg = fixture_run
    init = random_selectors(hidden=cfg.hidden_dim, width=cfg.selector_hidden)
    sel, logbook = meta_train(ds, pre, cfg, selectors=init, epochs=0)
    assert all(np.array_equal(sel[k], init[k]) for k in init)
    assert logbook.epochs == []


def test_twenty_epochs_lower_the_first_episode_loss(fixture_run):
    """Re-scoring epoch 1's episode with the trained selectors beats its epoch-1 loss."""
    ds, pre, cfg = fixture_run
    sel, logbook = meta_train(ds, pre, cfg)
    assert len(logbook.epochs) == 20
    t = logbook.pseudo_target[0]
    rest = tuple(j for j in range(ds.num_sources) if j != t)
    ctx = build_context(pre, ds.sources[t], t, rest)
    loss, _ = meta_gradient(sel, ctx, theta_of(initial_hypothesis(pre, rest)), cfg)
    assert loss < logbook.outer_loss[0]
    for s in logbook.s_global:
        assert np.isclose(s.sum(), 1.0, atol=1e-12)


def test_meta_train_is_reproducible(fixture_run):
    ds, pre, cfg = fixture_run
    a, la = meta_train(ds, pre, cfg, epochs=5)
    b, lb = meta_train(ds, pre, cfg, epochs=5)
    assert la.outer_loss == lb.outer_loss
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_final_adapt_is_reproducible(fixture_run):
    ds, pre, cfg = fixture_run
    sel = random_selectors(hidden=cfg.hidden_dim, width=cfg.selector_hidden, seed=4)
    h1, l1 = final_adapt(ds, pre, sel, cfg)
    h2, l2 = final_adapt(ds, pre, sel, cfg)
    assert l1 == l2
    assert np.array_equal(h1.classifier.W, h2.classifier.W)
    assert np.array_equal(h1.encoder.W1, h2.encoder.W1)


def test_kd_only_uniform_adaptation_is_plain_distillation(fixture_run):
    """With no alignment term and uniform weights, adaptation is gradient descent
    on the cross-entropy against the averaged source predictions."""
    ds, pre, cfg = fixture_run
    cfg = cfg.update(lam=0.0, use_global=False, use_local=False, final_steps=15, plateau_patience=1000)
    hyp, _ = final_adapt(ds, pre, {}, cfg)

    ctx = target_context(ds, pre)
    target = np.mean(ctx.predictions, axis=0)
    theta = theta_of(initial_hypothesis(pre, ctx.source_indices))
    for _ in range(15):
        params = {k: tn.param(v) for k, v in theta.items()}
        _, _, _, probs = forward(params, ds.target)
        store = tn.backward(kd_loss(probs, target))
        theta = {k: theta[k] - cfg.inner_lr * store[params[k]] for k in THETA_KEYS}
    assert np.allclose(theta_of(hyp)["Wc"], theta["Wc"], atol=1e-10)
    assert np.allclose(theta_of(hyp)["W1"], theta["W1"], atol=1e-10)
