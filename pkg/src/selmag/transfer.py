"""Self-supervised probes, exchange-based transfer scores and the two selectors.

Three probe tasks are trained per graph (masked attribute reconstruction,
edge prediction, neighbourhood-cluster context prediction). Evaluating graph
``j``'s trained probes on graph ``t`` yields ``s_T^{j->t}``: lower loss means
``j`` transfers better to ``t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import TrainConfig
from .graph import Graph
from .models import Encoder, encode, glorot, one_hot
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

TASKS = ("node", "edge", "context")


# ---------------------------------------------------------------------------
# k-means for context groups
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2 * x @ c.T, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt][None, :])[:, 0])
    return x[chosen].copy()


def fit_kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 50,
               tol: float = 1e-6) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding; returns centroids and inertia trace."""
    x = np.asarray(x, dtype=np.float64)
    if k <= 0:
        raise ValueError("number of clusters must be positive")
    if k > x.shape[0]:
        raise ValueError(f"cannot fit {k} clusters to {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    inertia: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        inertia.append(float(d2[np.arange(len(x)), assign].sum()))
        new = centroids.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = x[members].mean(axis=0)
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        if shift < tol:
            break
    return centroids, inertia


def assign_groups(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return _sq_dists(features, centroids).argmin(axis=1)


def context_targets(graph: Graph, centroids: np.ndarray) -> np.ndarray:
    """Per node, the distribution of cluster groups over its neighbourhood incl. itself."""
    if len(centroids) == 0:
        raise ValueError("empty centroid set")
    groups = one_hot(assign_groups(graph.features, centroids), len(centroids))
    adj = graph.neighbors_with_self().astype(np.float64)
    counts = adj @ groups
    return counts / counts.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# probe heads and losses
# ---------------------------------------------------------------------------

@dataclass
class SslHeads:
    node_W: np.ndarray | Tensor
    node_b: np.ndarray | Tensor
    context_W: np.ndarray | Tensor
    context_b: np.ndarray | Tensor
    centroids: np.ndarray

    KEYS = ("node_W", "node_b", "context_W", "context_b")

    @classmethod
    def init(cls, hidden: int, feature_dim: int, centroids: np.ndarray,
             rng: np.random.Generator) -> "SslHeads":
        m = len(centroids)
        if m < 1:
            raise ValueError("need at least one centroid")
        return cls(glorot(rng, hidden, feature_dim), np.zeros((1, feature_dim)),
                   glorot(rng, hidden, m), np.zeros((1, m)), np.asarray(centroids))

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}


@dataclass
class SslModel:
    """Per-graph encoder copy with its trained probe heads."""

    encoder: Encoder
    heads: SslHeads
    losses: list[float] = field(default_factory=list)


def node_mask(n: int, ratio: float, seed: int) -> np.ndarray:
    k = int(round(ratio * n))
    if k == 0:
        raise ValueError(f"mask ratio {ratio} selects zero of {n} nodes")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def reconstruction_loss(pred, target: np.ndarray) -> Tensor:
    return tn.mean(tn.square(tn.sub(pred, target)))


def ssl_node_loss(encoder: Encoder, heads: SslHeads, graph: Graph, mask_ratio: float,
                  seed: int) -> Tensor:
    idx = node_mask(graph.num_nodes, mask_ratio, seed)
    masked = np.array(graph.features)
    masked[idx] = 0.0
    x = encode(encoder, graph, features=masked)
    pred = tn.add(tn.matmul(tn.slice_rows(x, idx), heads.node_W), heads.node_b)
    return reconstruction_loss(pred, graph.features[idx])


def sample_edge_pairs(graph: Graph, num_neg: int | None, seed: int,
                      cap: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Positive edges (subsampled to ``cap``) and seeded non-edge pairs."""
    if len(graph.edges) == 0:
        raise ValueError("edge prediction needs at least one edge")
    rng = np.random.default_rng(seed)
    pos = graph.edges
    if cap is not None and len(pos) > cap:
        pos = pos[np.sort(rng.choice(len(pos), size=cap, replace=False))]
    want = len(pos) if num_neg is None else num_neg
    n = graph.num_nodes
    edge_keys = graph.edges[:, 0] * n + graph.edges[:, 1]
    neg = np.zeros((0, 2), dtype=np.int64)
    for _ in range(100):
        if len(neg) >= want:
            break
        cand = rng.integers(n, size=(2 * want + 16, 2))
        cand = np.sort(cand[cand[:, 0] != cand[:, 1]], axis=1)
        cand = cand[~np.isin(cand[:, 0] * n + cand[:, 1], edge_keys)]
        neg = np.vstack([neg, cand])
    return pos, neg[:want]


def edge_bce(x, pos: np.ndarray, neg: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(x_u . x_v)`` on positive and negative pairs."""
    x = tn.const(x)
    pairs = np.vstack([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])[:, None]
    dots = tn.sum(tn.mul(tn.slice_rows(x, pairs[:, 0]), tn.slice_rows(x, pairs[:, 1])), axis=1)
    p = tn.sigmoid(dots)
    ll = tn.add(tn.mul(tn.log(p), labels), tn.mul(tn.log(tn.sub(1.0, p)), 1.0 - labels))
    return tn.neg(tn.mean(ll))


def ssl_edge_loss(encoder: Encoder, graph: Graph, num_neg: int | None, seed: int,
                  cap: int | None = None) -> Tensor:
    pos, neg = sample_edge_pairs(graph, num_neg, seed, cap)
    return edge_bce(encode(encoder, graph), pos, neg)


def soft_ce(probs, target: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum(target * log probs)``."""
    return tn.neg(tn.mean(tn.sum(tn.mul(tn.log(probs), target), axis=1)))


def ssl_context_loss(encoder: Encoder, heads: SslHeads, graph: Graph,
                     centroids: np.ndarray | None = None) -> Tensor:
    cents = heads.centroids if centroids is None else centroids
    target = context_targets(graph, cents)
    x = encode(encoder, graph)
    probs = tn.softmax_rows(tn.add(tn.matmul(x, heads.context_W), heads.context_b))
    return soft_ce(probs, target)


def ssl_losses(encoder: Encoder, heads: SslHeads, graph: Graph, cfg: TrainConfig,
               seed: int) -> dict[str, Tensor]:
    """All three probe losses; edge and context share one unmasked forward pass."""
    x = encode(encoder, graph)
    pos, neg = sample_edge_pairs(graph, None, seed + 1, cfg.ssl_edge_cap)
    probs = tn.softmax_rows(tn.add(tn.matmul(x, heads.context_W), heads.context_b))
    return {
        "node": ssl_node_loss(encoder, heads, graph, cfg.mask_ratio, seed),
        "edge": edge_bce(x, pos, neg),
        "context": soft_ce(probs, context_targets(graph, heads.centroids)),
    }


def pretrain_ssl(encoder: Encoder, graph: Graph, cfg: TrainConfig, seed: int,
                 centroids: np.ndarray, epochs: int | None = None,
                 train_encoder: bool = True) -> SslModel:
    """Jointly fit the three probe heads (and the encoder copy) on one graph."""
    rng = np.random.default_rng(seed)
    enc = encoder.copy()
    heads = SslHeads.init(enc.hidden, graph.feature_dim, centroids, rng)
    params = {f"head.{k}": v for k, v in heads.params().items()}
    if train_encoder:
        params.update({f"enc.{k}": v for k, v in enc.params().items()})
    opt = Adam(params, lr=cfg.ssl_lr)
    losses: list[float] = []
    n_epochs = cfg.ssl_epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        t = {k: tn.param(v) for k, v in params.items()}
        e = Encoder(*(t[f"enc.{k}"] for k in ("W1", "b1", "W2", "b2"))) if train_encoder else enc
        h = SslHeads(*(t[f"head.{k}"] for k in SslHeads.KEYS), centroids)
        parts = ssl_losses(e, h, graph, cfg, seed * 7919 + epoch)
        total = tn.add(tn.add(parts["node"], parts["edge"]), parts["context"])
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"SSL pretraining: non-finite loss at epoch {epoch}")
        losses.append(value)
        store = tn.backward(total)
        opt.step({k: store[v] for k, v in t.items()})
    if train_encoder:
        enc = Encoder(*(params[f"enc.{k}"] for k in ("W1", "b1", "W2", "b2")))
    heads = SslHeads(*(params[f"head.{k}"] for k in SslHeads.KEYS), centroids)
    return SslModel(enc, heads, losses)


def transfer_score(model: SslModel, target: Graph, cfg: TrainConfig, seed: int) -> dict[str, float]:
    """Losses of one graph's trained probes evaluated on ``target``, without updates."""
    parts = ssl_losses(model.encoder, model.heads, target, cfg, seed)
    return {k: v.item() for k, v in parts.items()}


# ---------------------------------------------------------------------------
# scores and selectors
# ---------------------------------------------------------------------------

@dataclass
class TransferScores:
    """``raw_loss[j]`` holds probe losses of source ``j`` on the target, in ``TASKS`` order."""

    raw_loss: np.ndarray
    self_reference: np.ndarray

    def __post_init__(self):
        self.raw_loss = np.atleast_2d(np.asarray(self.raw_loss, dtype=np.float64))
        self.self_reference = np.asarray(self.self_reference, dtype=np.float64).reshape(-1)
        if self.raw_loss.shape[1] != len(TASKS) or self.self_reference.shape != (len(TASKS),):
            raise ValueError("scores need one column per probe task")
        if not np.all(np.isfinite(self.raw_loss)):
            raise ValueError("non-finite transfer loss")

    @property
    def num_sources(self) -> int:
        return self.raw_loss.shape[0]

    def subset(self, rows) -> "TransferScores":
        return TransferScores(self.raw_loss[list(rows)], self.self_reference)

    @property
    def normalized_features(self) -> np.ndarray:
        return selector_features(self.raw_loss, self.self_reference)


def _neglog(x: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(x, 1e-12))


def selector_features(raw: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Z-scored ``-log s^{j->t}`` per task, then the log drop against ``s^{t->t}``."""
    nl = _neglog(raw)
    sd = nl.std(axis=0)
    z = np.where(sd > 1e-12, (nl - nl.mean(axis=0)) / np.where(sd > 1e-12, sd, 1.0), 0.0)
    drop = nl - _neglog(ref)[None, :]
    return np.hstack([z, drop])


@dataclass
class SelectorParams:
    g_W1: np.ndarray
    g_b1: np.ndarray
    g_W2: np.ndarray
    g_b2: np.ndarray
    l_W1: np.ndarray
    l_b1: np.ndarray
    l_W2: np.ndarray
    l_b2: np.ndarray

    KEYS = ("g_W1", "g_b1", "g_W2", "g_b2", "l_W1", "l_b1", "l_W2", "l_b2")

    @classmethod
    def init(cls, hidden: int, width: int = 16, seed: int = 0) -> "SelectorParams":
        """Glorot hidden layers and zero output layers, so training starts from
        uniform source weights and ``s_local = 0.5`` everywhere."""
        rng = np.random.default_rng(seed)
        n_in = 2 * len(TASKS)
        return cls(glorot(rng, n_in, width), np.zeros((1, width)), np.zeros((width, 1)), np.zeros((1, 1)),
                   glorot(rng, 3 * hidden, width), np.zeros((1, width)), np.zeros((width, 1)),
                   np.zeros((1, 1)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.KEYS}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectorParams":
        return cls(*(d[k] for k in cls.KEYS))

    def copy(self) -> "SelectorParams":
        return SelectorParams(*(np.array(getattr(self, k)) for k in self.KEYS))


def _mlp(x, W1, b1, W2, b2) -> Tensor:
    return tn.add(tn.matmul(tn.relu(tn.add(tn.matmul(x, W1), b1)), W2), b2)


def global_select(params: dict, features: np.ndarray) -> Tensor:
    """Normalised softplus scores, one per source row of ``features``: shape ``(K, 1)``."""
    features = np.atleast_2d(features)
    if features.shape[0] == 0:
        raise ValueError("global_select needs at least one source")
    raw = tn.softplus(_mlp(features, params["g_W1"], params["g_b1"], params["g_W2"], params["g_b2"]))
    inv_total = tn.exp(tn.neg(tn.log(tn.sum(raw))))
    return tn.mul(raw, inv_total)


def pool_target(x) -> Tensor:
    x = tn.const(x)
    if x.shape[0] == 0:
        raise ValueError("cannot pool an empty embedding matrix")
    return tn.concat_cols([tn.max_pool_rows(x), tn.mean_pool_rows(x)])


def local_select(params: dict, x_nodes, pooled) -> Tensor:
    """Sigmoid weight per source node, conditioned on the pooled target: ``(M, 1)``."""
    x_nodes = tn.const(x_nodes)
    pooled = tn.const(pooled)
    h = x_nodes.shape[1]
    if pooled.shape != (1, 2 * h):
        raise tn.TapeError(f"pooled target must be (1, {2 * h}), got {pooled.shape}")
    if params["l_W1"].shape[0] != 3 * h:
        raise tn.TapeError("local selector width does not match embedding size")
    tiled = tn.matmul(np.ones((x_nodes.shape[0], 1)), pooled)
    inp = tn.concat_cols([x_nodes, tiled])
    return tn.sigmoid(_mlp(inp, params["l_W1"], params["l_b1"], params["l_W2"], params["l_b2"]))
