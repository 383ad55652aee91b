"""Episodic meta-training of the selectors and final adaptation of the target model.

The target model is adapted by plain gradient descent whose per-step gradient
is written out explicitly as tape operations. The adapted parameters are
therefore differentiable functions of the selector parameters, and the
selector update backpropagates through the whole unrolled trajectory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import TrainConfig
from .distill import kd_loss, pseudo_labels, source_predictions
from .graph import DomainSet, Graph
from .models import Classifier, Encoder, Hypothesis, _val, ce_loss, propagated_features
from .optim import Adam
from .ot import (WarmStart, cost_scale, entropic_plan, selot_loss, solve_selective_plan, sq_dist,
                 stacked_weights)
from .tensor import Tensor
from .transfer import SelectorParams, global_select, local_select, pool_target, selector_features

log = logging.getLogger(__name__)

THETA_KEYS = ("W1", "b1", "W2", "b2", "Wc", "bc")


@dataclass
class Pretrained:
    """Frozen products of pretraining that meta-training reads.

    ``embeddings[g]`` is the shared encoder applied to graph ``g`` (sources in
    order, then the target); ``scores[j, t]`` holds the probe losses of graph
    ``j``'s modules on graph ``t``, one column per task.
    """

    encoder: Encoder
    classifiers: list[Classifier]
    embeddings: list[np.ndarray]
    scores: np.ndarray


@dataclass
class Episode:
    target_index: int
    source_indices: tuple[int, ...]
    pseudo_target: Graph
    pseudo_sources: list[Graph]


def sample_episode(ds: DomainSet, rng: np.random.Generator) -> Episode:
    k = ds.num_sources
    if k < 2:
        raise ValueError("episodes need at least two source graphs")
    t = int(rng.integers(k))
    rest = tuple(j for j in range(k) if j != t)
    return Episode(t, rest, ds.sources[t], [ds.sources[j] for j in rest])


@dataclass
class AdaptContext:
    """Everything about one (pseudo-)target that stays fixed while adapting to it."""

    graph: Graph
    source_indices: tuple[int, ...]
    xs_list: list[np.ndarray]
    predictions: list[np.ndarray]
    pooled: np.ndarray
    features: np.ndarray
    scale: float = 1.0
    warm: WarmStart = field(default_factory=WarmStart)
    xs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xs = np.vstack(self.xs_list)

    @property
    def sizes(self) -> list[int]:
        return [len(x) for x in self.xs_list]


def build_context(pre: Pretrained, graph: Graph, target_index: int,
                  source_indices: tuple[int, ...]) -> AdaptContext:
    xt = pre.embeddings[target_index]
    raw = pre.scores[list(source_indices), target_index]
    ref = pre.scores[target_index, target_index]
    return AdaptContext(
        graph=graph,
        source_indices=tuple(source_indices),
        xs_list=[pre.embeddings[j] for j in source_indices],
        predictions=source_predictions(xt, [pre.classifiers[j] for j in source_indices]),
        pooled=pool_target(xt).value,
        features=selector_features(raw, ref),
        scale=cost_scale([pre.embeddings[j] for j in source_indices], xt),
    )


def initial_hypothesis(pre: Pretrained, source_indices) -> Hypothesis:
    """Shared encoder plus the average of the given sources' classifiers."""
    clss = [pre.classifiers[j] for j in source_indices]
    W = np.mean([_val(c.W) for c in clss], axis=0)
    b = np.mean([_val(c.b) for c in clss], axis=0)
    return Hypothesis(pre.encoder.copy(), Classifier(W, b))


def theta_of(hyp: Hypothesis) -> dict[str, np.ndarray]:
    e, c = hyp.encoder, hyp.classifier
    return {"W1": _val(e.W1), "b1": _val(e.b1), "W2": _val(e.W2), "b2": _val(e.b2),
            "Wc": _val(c.W), "bc": _val(c.b)}


def hypothesis_of(theta: dict) -> Hypothesis:
    v = {k: _val(theta[k]) for k in THETA_KEYS}
    return Hypothesis(Encoder(v["W1"], v["b1"], v["W2"], v["b2"]), Classifier(v["Wc"], v["bc"]))


# ---------------------------------------------------------------------------
# selection weights and the adaptation objective
# ---------------------------------------------------------------------------

def selection_weights(selectors: dict, ctx: AdaptContext,
                      cfg: TrainConfig) -> tuple[Tensor, Tensor | None, Tensor]:
    """``(s_global, s_local, w)``: per-source ``(K, 1)``, per-node ``(M, 1)`` or None
    when the local selector is off, and their product per stacked row."""
    k = len(ctx.source_indices)
    if cfg.use_global:
        s_global = global_select(selectors, ctx.features)
    else:
        s_global = tn.const(np.full((k, 1), 1.0 / k))
    s_local = local_select(selectors, ctx.xs, ctx.pooled) if cfg.use_local else None
    return s_global, s_local, stacked_weights(s_global, s_local, ctx.sizes)


def forward(theta: dict, graph: Graph):
    """Target-model pass returning ``(Z1, A_hat H, X, probs)``."""
    z1 = tn.add(tn.matmul(propagated_features(graph), theta["W1"]), theta["b1"])
    ah = tn.matmul(graph.norm_adj, tn.relu(z1))
    x = tn.add(tn.matmul(ah, theta["W2"]), theta["b2"])
    probs = tn.softmax_rows(tn.add(tn.matmul(x, theta["Wc"]), theta["bc"]))
    return z1, ah, x, probs


def adaptation_loss(theta: dict, ctx: AdaptContext, selectors: dict, cfg: TrainConfig,
                    warm: WarmStart | None = None) -> Tensor:
    """``lam * SelOT + (1 - lam) * KD`` as a tape scalar."""
    s_global, s_local, _ = selection_weights(selectors, ctx, cfg)
    _, _, x, probs = forward(theta, ctx.graph)
    lam = cfg.lam
    parts = []
    if lam > 0:
        ot = selot_loss(ctx.xs_list, x, s_global, s_local, cfg.epsilon, cfg.sinkhorn_tol,
                        cfg.sinkhorn_max_iter, warm, ctx.scale)
        parts.append(ot if lam == 1 else tn.scalar_mul(ot, lam))
    if lam < 1:
        kd = kd_loss(probs, pseudo_labels(ctx.predictions, s_global))
        parts.append(kd if lam == 0 else tn.scalar_mul(kd, 1.0 - lam))
    return parts[0] if len(parts) == 1 else tn.add(parts[0], parts[1])


def inner_gradients(theta: dict, ctx: AdaptContext, w: Tensor, ybar: Tensor | None,
                    cfg: TrainConfig, warm: WarmStart | None = None) -> tuple[dict, float]:
    """Gradient of the adaptation loss w.r.t. every target-model parameter.

    The result is built from tape operations, so it stays differentiable in
    ``w`` and ``ybar``. The ReLU pattern is a constant; the transport plan is
    one too unless ``cfg.plan_grad`` is "implicit".
    Returns ``(grads, loss_value)``.
    """
    lam = cfg.lam
    z1, ah, x, probs = forward(theta, ctx.graph)
    value = 0.0
    dx = None
    zeros = {k: np.zeros(_val(theta[k]).shape) for k in ("Wc", "bc")}
    d_wc, d_bc = tn.const(zeros["Wc"]), tn.const(zeros["bc"])
    if lam > 0:
        w = tn.scalar_mul(w, 1.0 / ctx.scale)
        if cfg.plan_grad == "implicit" and (w.requires_grad or x.requires_grad):
            gamma, plan = entropic_plan(tn.mul(sq_dist(ctx.xs, x), w), cfg.epsilon, cfg.sinkhorn_tol,
                                        cfg.sinkhorn_max_iter, warm)
            gamma_t = tn.transpose(gamma)
        else:
            plan = solve_selective_plan(ctx.xs, x.value, w.value, cfg.epsilon, cfg.sinkhorn_tol,
                                        cfg.sinkhorn_max_iter, warm)
            gamma_t = plan.gamma.T
        value += lam * plan.transport_cost
        colw = tn.matmul(gamma_t, w)
        pull = tn.matmul(gamma_t, tn.mul(ctx.xs, w))
        dx = tn.scalar_mul(tn.sub(tn.mul(x, colw), pull), 2.0 * lam)
    if lam < 1:
        value += (1.0 - lam) * kd_loss(probs.value, ybar.value).item()
        n = x.shape[0]
        dlogits = tn.scalar_mul(tn.sub(probs, ybar), (1.0 - lam) / n)
        d_wc = tn.matmul(tn.transpose(x), dlogits)
        d_bc = tn.sum(dlogits, axis=0)
        dx_kd = tn.matmul(dlogits, tn.transpose(theta["Wc"]))
        dx = dx_kd if dx is None else tn.add(dx, dx_kd)
    d_w2 = tn.matmul(tn.transpose(ah), dx)
    d_b2 = tn.sum(dx, axis=0)
    dh = tn.matmul(ctx.graph.norm_adj, tn.matmul(dx, tn.transpose(theta["W2"])))
    dz1 = tn.mul(dh, (z1.value > 0).astype(np.float64))
    d_w1 = tn.matmul(propagated_features(ctx.graph).T, dz1)
    d_b1 = tn.sum(dz1, axis=0)
    grads = {"W1": d_w1, "b1": d_b1, "W2": d_w2, "b2": d_b2, "Wc": d_wc, "bc": d_bc}
    return grads, value


def inner_adapt(theta0: dict, ctx: AdaptContext, selectors: dict, cfg: TrainConfig,
                steps: int | None = None, warm: WarmStart | None = None,
                plateau: bool = False) -> tuple[dict, list[float]]:
    """Plain gradient descent on the adaptation loss; returns tape-connected parameters."""
    n_steps = cfg.inner_steps if steps is None else steps
    if n_steps < 0:
        raise ValueError("number of inner steps must be nonnegative")
    theta = {k: tn.const(theta0[k]) for k in THETA_KEYS}
    if n_steps == 0:
        return theta, []
    s_global, _, w = selection_weights(selectors, ctx, cfg)
    ybar = pseudo_labels(ctx.predictions, s_global) if cfg.lam < 1 else None
    losses: list[float] = []
    best, stale = np.inf, 0
    for step in range(n_steps):
        grads, value = inner_gradients(theta, ctx, w, ybar, cfg, warm)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite adaptation loss at inner step {step}")
        losses.append(value)
        theta = {k: tn.sub(theta[k], tn.scalar_mul(grads[k], cfg.inner_lr)) for k in THETA_KEYS}
        if plateau:
            if best - value < cfg.plateau_delta:
                stale += 1
                if stale >= cfg.plateau_patience:
                    break
            else:
                stale = 0
            best = min(best, value)
    return theta, losses


# ---------------------------------------------------------------------------
# outer update
# ---------------------------------------------------------------------------

def outer_loss(theta: dict, graph: Graph) -> Tensor:
    """Supervised CE of the adapted model on the (pseudo-)target's labeled nodes."""
    _, _, _, probs = forward(theta, graph)
    return ce_loss(probs, graph.labels, graph.labeled_mask)


def meta_gradient(selectors: dict[str, np.ndarray], ctx: AdaptContext, theta0: dict,
                  cfg: TrainConfig, warm: WarmStart | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Outer loss after the unrolled inner loop and its gradient w.r.t. every selector parameter."""
    sel = {k: tn.param(v) for k, v in selectors.items()}
    theta, _ = inner_adapt(theta0, ctx, sel, cfg, warm=warm)
    loss = outer_loss(theta, ctx.graph)
    store = tn.backward(loss)
    return loss.item(), {k: store[t] for k, t in sel.items()}


def outer_step(selectors: dict[str, np.ndarray], opt: Adam, ctx: AdaptContext, theta0: dict,
               cfg: TrainConfig, warm: WarmStart | None = None) -> float:
    """One Adam update of the selectors (in place); returns the outer loss."""
    loss, grads = meta_gradient(selectors, ctx, theta0, cfg, warm)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError("non-finite meta-gradient")
    opt.step(grads)
    return loss


def plateaued(losses: list[float], window: int, delta: float) -> bool:
    """True when the mean of the last ``window`` losses improves on the window
    before it by less than ``delta``."""
    if window <= 0 or len(losses) < 2 * window:
        return False
    recent = float(np.mean(losses[-window:]))
    before = float(np.mean(losses[-2 * window:-window]))
    return before - recent < delta


@dataclass
class MetaLog:
    epochs: list[int] = field(default_factory=list)
    outer_loss: list[float] = field(default_factory=list)
    s_global: list[np.ndarray] = field(default_factory=list)
    pseudo_target: list[int] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def rows(self, num_sources: int) -> list[list]:
        """CSV rows: epoch, outer loss, then s_global per source (missing for the pseudo-target)."""
        out = []
        for e, loss, t, s in zip(self.epochs, self.outer_loss, self.pseudo_target, self.s_global):
            full = np.full(num_sources, np.nan)
            full[[j for j in range(num_sources) if j != t]] = s
            out.append([e, loss, *full])
        return out


def meta_train(ds: DomainSet, pre: Pretrained, cfg: TrainConfig,
               selectors: dict[str, np.ndarray] | None = None,
               epochs: int | None = None) -> tuple[dict[str, np.ndarray], MetaLog]:
    """Episodic selector training; one sampled pseudo-target per epoch."""
    if selectors is None:
        selectors = SelectorParams.init(cfg.hidden_dim, cfg.selector_hidden, seed=cfg.seed + 23).as_dict()
    selectors = {k: np.array(v, dtype=np.float64) for k, v in selectors.items()}
    logbook = MetaLog()
    n_epochs = cfg.max_outer_epochs if epochs is None else epochs
    if n_epochs == 0 or not (cfg.use_global or cfg.use_local):
        return selectors, logbook
    opt = Adam(selectors, lr=cfg.outer_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 31)
    contexts: dict[int, AdaptContext] = {}
    first: dict[int, float] = {}
    relative: list[float] = []
    for epoch in range(n_epochs):
        ep = sample_episode(ds, rng)
        ctx = contexts.get(ep.target_index)
        if ctx is None:
            ctx = contexts[ep.target_index] = build_context(pre, ep.pseudo_target, ep.target_index,
                                                            ep.source_indices)
        theta0 = theta_of(initial_hypothesis(pre, ep.source_indices))
        try:
            loss = outer_step(selectors, opt, ctx, theta0, cfg, ctx.warm)
        except FloatingPointError as exc:
            log.warning("epoch %d: episode skipped (%s)", epoch, exc)
            logbook.skipped.append(epoch)
            continue
        s_global, _, _ = selection_weights(selectors, ctx, cfg)
        logbook.epochs.append(epoch)
        logbook.outer_loss.append(loss)
        logbook.pseudo_target.append(ep.target_index)
        logbook.s_global.append(s_global.value[:, 0].copy())
        # pseudo-targets differ in difficulty, so progress is measured against
        # each one's first outer loss
        first.setdefault(ep.target_index, max(loss, 1e-12))
        relative.append(loss / first[ep.target_index])
        if plateaued(relative, cfg.plateau_patience, cfg.plateau_delta):
            log.info("meta-training plateaued at epoch %d", epoch)
            break
    return selectors, logbook


def target_context(ds: DomainSet, pre: Pretrained, sources: tuple[int, ...] | None = None) -> AdaptContext:
    idx = tuple(range(ds.num_sources)) if sources is None else tuple(sources)
    return build_context(pre, ds.target, ds.num_sources, idx)


def final_adapt(ds: DomainSet, pre: Pretrained, selectors: dict[str, np.ndarray], cfg: TrainConfig,
                sources: tuple[int, ...] | None = None) -> tuple[Hypothesis, list[float]]:
    """Adapt a fresh target model on the real target with frozen selectors."""
    ctx = target_context(ds, pre, sources)
    theta0 = theta_of(initial_hypothesis(pre, ctx.source_indices))
    steps = cfg.final_steps if cfg.final_steps is not None else cfg.max_outer_epochs * cfg.inner_steps
    theta, losses = inner_adapt(theta0, ctx, selectors, cfg, steps=steps, warm=ctx.warm, plateau=True)
    return hypothesis_of(theta), losses


def selector_outputs(selectors: dict[str, np.ndarray], ctx: AdaptContext,
                     cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(s_global per source, s_local per stacked source node)`` as plain arrays."""
    s_global, s_local, w = selection_weights(selectors, ctx, cfg)
    local = s_local.value[:, 0] if s_local is not None else np.ones(w.shape[0])
    return s_global.value[:, 0], local
