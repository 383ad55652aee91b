"""Small seeded fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from selmag.config import TrainConfig
from selmag.evaluation import Experiment
from selmag.graph import DomainSet, Graph
from selmag.meta import Pretrained, build_context
from selmag.models import Classifier, Encoder, encode_np
from selmag.pipeline import prepare_domains
from selmag.synth import default_base_params, default_schedule, generate_suite
from selmag.transfer import SelectorParams


def random_graph(n: int, d: int, r: int, seed: int, p: float = 0.3, labeled: float = 0.5) -> Graph:
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    labels = rng.integers(r, size=n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=max(1, int(labeled * n)), replace=False)] = True
    return Graph(n, edges, rng.normal(size=(n, d)), labels, mask)


def tiny_domains(num_sources: int = 2, n: int = 12, d: int = 5, r: int = 3, seed: int = 0) -> DomainSet:
    sources = [random_graph(n, d, r, seed * 100 + k) for k in range(num_sources)]
    target = random_graph(n, d, r, seed * 100 + 99)
    return DomainSet(sources, target, r, d)


def tiny_pretrained(ds: DomainSet, hidden: int = 4, seed: int = 0) -> Pretrained:
    rng = np.random.default_rng(seed + 5)
    enc = Encoder.init(ds.feature_dim, hidden, rng)
    clss = [Classifier.init(hidden, ds.num_classes, rng) for _ in ds.sources]
    graphs = [*ds.sources, ds.target]
    emb = [encode_np(enc, g) for g in graphs]
    scores = rng.uniform(0.2, 2.0, size=(len(graphs), len(graphs), 3))
    return Pretrained(enc, clss, emb, scores)


def random_selectors(hidden: int = 4, width: int = 16, seed: int = 0, scale: float = 0.5) -> dict:
    """Selector parameters with nonzero output layers so every gradient path is live."""
    rng = np.random.default_rng(seed)
    base = SelectorParams.init(hidden, width, seed).as_dict()
    return {k: scale * rng.normal(size=v.shape) for k, v in base.items()}


def tiny_context(seed: int = 0, hidden: int = 4, num_sources: int = 2, n: int = 12):
    """``(ds, pre, ctx)`` where the labeled target graph plays the pseudo-target."""
    ds = tiny_domains(num_sources, n, seed=seed)
    pre = tiny_pretrained(ds, hidden, seed)
    ctx = build_context(pre, ds.target, num_sources, tuple(range(num_sources)))
    return ds, pre, ctx


def tiny_config(**overrides) -> TrainConfig:
    base = dict(hidden_dim=4, inner_steps=2, inner_lr=0.1, epsilon=0.05, sinkhorn_tol=1e-12,
                sinkhorn_max_iter=100000, lam=0.3)
    base.update(overrides)
    return TrainConfig(**base).validate()


def small_config(seed: int = 0, **overrides) -> TrainConfig:
    """Desk-fast settings for end-to-end fixtures."""
    base = dict(seed=seed, hidden_dim=16, source_epochs=150, ssl_epochs=20, label_ratio=0.3,
                max_outer_epochs=20, plateau_patience=1000, final_steps=100)
    base.update(overrides)
    return TrainConfig(**base).validate()


def small_suite(seed: int = 0, num_sources: int = 3, num_nodes: int = 60, **schedule):
    """``(ds, target_labels)`` for a small shifted suite with revealed source labels."""
    ds, _, y = generate_suite(default_schedule(num_sources, **schedule), default_base_params(seed, num_nodes))
    return prepare_domains(ds, small_config(seed)), y


def small_experiment(seed: int = 0, **overrides):
    ds, y = small_suite(seed)
    return Experiment(ds, small_config(seed, **overrides), y)
