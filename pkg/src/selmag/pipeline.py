"""Pretraining orchestration: label split, source models, probes and transfer scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .graph import DomainSet, Graph, split_labels, standardize_features
from .meta import Pretrained
from .models import (ENCODER_KEYS, Encoder, TrainResult, encode_np, load_params, save_params,
                     source_params, source_result_from_params, train_source_models)
from .transfer import TASKS, SslHeads, SslModel, fit_kmeans, pretrain_ssl, transfer_score

log = logging.getLogger(__name__)


def prepare_domains(ds: DomainSet, cfg: TrainConfig) -> DomainSet:
    """Reveal ``label_ratio`` of each source's labels (seeded) and optionally z-score."""
    sources = [split_labels(g, cfg.label_ratio, cfg.seed * 7919 + k) for k, g in enumerate(ds.sources)]
    out = ds.with_sources(sources)
    return standardize_features(out) if cfg.standardize else out


def all_graphs(ds: DomainSet) -> list[Graph]:
    return [*ds.sources, ds.target]


def ssl_seed(cfg: TrainConfig, g: int) -> int:
    return cfg.seed * 1000 + g


def eval_seed(cfg: TrainConfig, t: int) -> int:
    """Mask and negative-sampling seed shared by every probe evaluated on graph ``t``."""
    return cfg.seed * 1000 + 500 + t


@dataclass
class PretrainArtifacts:
    source: TrainResult
    ssl_models: list[SslModel]
    centroids: np.ndarray
    scores: np.ndarray

    def pretrained(self, ds: DomainSet) -> Pretrained:
        emb = [encode_np(self.source.encoder, g) for g in all_graphs(ds)]
        return Pretrained(self.source.encoder, self.source.classifiers, emb, self.scores)


def pretrain_probes(ds: DomainSet, cfg: TrainConfig, shared: Encoder | None = None) -> tuple[list[SslModel], np.ndarray]:
    graphs = all_graphs(ds)
    centroids, _ = fit_kmeans(np.vstack([g.features for g in graphs]), cfg.num_clusters, cfg.seed)
    models = []
    for g, graph in enumerate(graphs):
        if cfg.ssl_share_encoder and shared is not None:
            enc, train_encoder = shared, False
        else:
            enc = Encoder.init(ds.feature_dim, cfg.hidden_dim, np.random.default_rng(ssl_seed(cfg, g) + 77))
            train_encoder = True
        models.append(pretrain_ssl(enc, graph, cfg, ssl_seed(cfg, g), centroids,
                                   train_encoder=train_encoder))
    return models, centroids


def score_table(models: list[SslModel], graphs: list[Graph], cfg: TrainConfig) -> np.ndarray:
    """``out[j, t, task]``: probe loss of graph ``j``'s modules on graph ``t``."""
    n = len(graphs)
    out = np.zeros((n, n, len(TASKS)))
    for t, graph in enumerate(graphs):
        for j, model in enumerate(models):
            s = transfer_score(model, graph, cfg, eval_seed(cfg, t))
            out[j, t] = [s[k] for k in TASKS]
    return out


def pretrain(ds: DomainSet, cfg: TrainConfig) -> PretrainArtifacts:
    """Supervised source models, per-graph probes and the full transfer-score table."""
    source = train_source_models(ds, cfg)
    models, centroids = pretrain_probes(ds, cfg, source.encoder)
    scores = score_table(models, all_graphs(ds), cfg)
    return PretrainArtifacts(source, models, centroids, scores)


def restrict_sources(ds: DomainSet, keep: list[int]) -> DomainSet:
    return replace(ds, sources=[ds.sources[k] for k in keep])


# ---------------------------------------------------------------------------
# on-disk artifacts
# ---------------------------------------------------------------------------

SOURCE_FILE = "source_models.json"
SCORES_FILE = "transfer_scores.json"
SSL_DIR = "ssl"


def ssl_path(root: Path, g: int) -> Path:
    return Path(root) / SSL_DIR / f"graph_{g}.json"


def save_ssl_model(path: Path, model: SslModel) -> None:
    params = {f"enc.{k}": v for k, v in model.encoder.params().items()}
    params.update({f"head.{k}": v for k, v in model.heads.params().items()})
    params["centroids"] = model.heads.centroids
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, params)


def load_ssl_model(path: Path) -> SslModel:
    p = load_params(path)
    enc = Encoder(*(p[f"enc.{k}"] for k in ENCODER_KEYS))
    heads = SslHeads(*(p[f"head.{k}"] for k in SslHeads.KEYS), p["centroids"])
    return SslModel(enc, heads)


def save_scores(path: Path, scores: np.ndarray) -> None:
    save_params(path, {"scores": scores})


def load_scores(path: Path) -> np.ndarray:
    return load_params(path)["scores"]


def save_pretrain(root: Path, arts: PretrainArtifacts) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_params(root / SOURCE_FILE, source_params(arts.source))
    for g, model in enumerate(arts.ssl_models):
        save_ssl_model(ssl_path(root, g), model)
    save_scores(root / SCORES_FILE, arts.scores)


def load_pretrain(root: Path, num_graphs: int) -> PretrainArtifacts:
    root = Path(root)
    for path in [root / SOURCE_FILE, root / SCORES_FILE, *(ssl_path(root, g) for g in range(num_graphs))]:
        if not path.exists():
            raise FileNotFoundError(f"missing pretraining artifact {path}")
    source = source_result_from_params(load_params(root / SOURCE_FILE))
    models = [load_ssl_model(ssl_path(root, g)) for g in range(num_graphs)]
    return PretrainArtifacts(source, models, models[0].heads.centroids, load_scores(root / SCORES_FILE))


def score_rows(scores: np.ndarray, num_sources: int) -> tuple[list[list], list[list]]:
    """CSV rows for the real target (``task,source,loss,self_reference_loss``) and for
    every ordered source pair (``task,source,target,loss,self_reference_loss``)."""
    t = num_sources
    target_rows, pair_rows = [], []
    for i, task in enumerate(TASKS):
        for j in range(num_sources):
            target_rows.append([task, j, repr(float(scores[j, t, i])), repr(float(scores[t, t, i]))])
        for j in range(num_sources):
            for k in range(num_sources):
                pair_rows.append([task, j, k, repr(float(scores[j, k, i])), repr(float(scores[k, k, i]))])
    return target_rows, pair_rows
