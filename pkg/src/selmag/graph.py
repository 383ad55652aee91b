"""Graph data model, adjacency normalisation, dataset IO and label splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Malformed or inconsistent dataset directory."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Undirected, deduplicated ``(u, v)`` pairs with ``u < v``; self edges dropped."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise DatasetError(f"edge endpoint out of range for {num_nodes} nodes")
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if e.size:
        e = np.unique(e, axis=0)
    return e


def normalize_adjacency(edges, num_nodes: int) -> np.ndarray:
    """Symmetric renormalised adjacency ``D^-1/2 (A + I) D^-1/2``."""
    e = canonical_edges(edges, num_nodes)
    a = np.eye(num_nodes)
    a[e[:, 0], e[:, 1]] = 1.0
    a[e[:, 1], e[:, 0]] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    labeled_mask: np.ndarray | None = None
    norm_adj: np.ndarray | None = None

    def __post_init__(self):
        edges = canonical_edges(self.edges, self.num_nodes)
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise DatasetError(
                f"features have shape {feats.shape}, expected ({self.num_nodes}, d)")
        if not np.all(np.isfinite(feats)):
            raise DatasetError("non-finite feature values")
        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (self.num_nodes,):
                raise DatasetError("labels length differs from num_nodes")
        mask = self.labeled_mask
        if mask is None or labels is None:
            mask = np.zeros(self.num_nodes, dtype=bool)
        mask = np.array(mask, dtype=bool)
        adj = self.norm_adj
        if adj is None:
            adj = normalize_adjacency(edges, self.num_nodes)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", None if labels is None else _frozen(labels))
        object.__setattr__(self, "labeled_mask", _frozen(mask))
        object.__setattr__(self, "norm_adj", _frozen(np.array(adj, dtype=np.float64)))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_index(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)

    def without_labels(self) -> "Graph":
        return replace(self, labels=None, labeled_mask=None)

    def with_features(self, features: np.ndarray) -> "Graph":
        return replace(self, features=features)

    def neighbors_with_self(self) -> np.ndarray:
        """Boolean adjacency including self-loops."""
        return self.norm_adj > 0


@dataclass(frozen=True, eq=False)
class DomainSet:
    sources: list[Graph]
    target: Graph
    num_classes: int
    feature_dim: int = field(default=0)

    def __post_init__(self):
        if len(self.sources) < 1:
            raise DatasetError("need at least one source graph")
        d = self.feature_dim or self.sources[0].feature_dim
        object.__setattr__(self, "feature_dim", d)
        for g in [*self.sources, self.target]:
            if g.feature_dim != d:
                raise DatasetError(f"feature_dim mismatch: {g.feature_dim} != {d}")
            if g.labels is not None and g.labels.size and (
                    g.labels.min() < 0 or g.labels.max() >= self.num_classes):
                raise DatasetError("label id outside [0, num_classes)")

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def with_sources(self, sources: list[Graph]) -> "DomainSet":
        return replace(self, sources=list(sources))


def split_labels(graph: Graph, ratio: float, seed: int) -> Graph:
    """Mark ``ceil(ratio * n)`` nodes, chosen uniformly under ``seed``, as labeled."""
    if graph.labels is None:
        raise DatasetError("cannot split an unlabeled graph")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    n = graph.num_nodes
    k = min(n, math.ceil(ratio * n - 1e-9))
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return replace(graph, labeled_mask=mask)


def standardize_features(ds: DomainSet) -> DomainSet:
    """Z-score every graph with statistics of the pooled source attributes."""
    pooled = np.vstack([g.features for g in ds.sources])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd[sd == 0] = 1.0
    sources = [g.with_features((g.features - mu) / sd) for g in ds.sources]
    target = ds.target.with_features((ds.target.features - mu) / sd)
    return replace(ds, sources=sources, target=target)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_graph(graph: Graph, path: Path, num_classes: int, with_labels: bool = True) -> None:
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": graph.num_nodes, "feature_dim": graph.feature_dim,
            "num_classes": num_classes}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(path / "edges.tsv", "w") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(path / "features.tsv", "w") as fh:
        for row in graph.features:
            fh.write("\t".join(_fmt(x) for x in row) + "\n")
    if with_labels and graph.labels is not None:
        write_labels(path / "labels.tsv", graph.labels)


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "w") as fh:
        for i, y in enumerate(labels):
            fh.write(f"{i}\t{int(y)}\n")


def read_labels(path: Path, num_nodes: int, num_classes: int) -> np.ndarray:
    labels = np.full(num_nodes, -1, dtype=np.int64)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            node, cls = (int(x) for x in line.split("\t"))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: expected 'node_id<TAB>class_id'") from None
        if not 0 <= node < num_nodes:
            raise DatasetError(f"{path}:{lineno}: node id {node} out of range")
        if not 0 <= cls < num_classes:
            raise DatasetError(f"{path}:{lineno}: class id {cls} >= num_classes {num_classes}")
        labels[node] = cls
    if (labels < 0).any():
        raise DatasetError(f"{path}: {int((labels < 0).sum())} nodes lack a label")
    return labels


def read_graph(path: Path, num_classes: int, feature_dim: int, with_labels: bool) -> Graph:
    path = Path(path)
    for name in ("meta.json", "edges.tsv", "features.tsv"):
        if not (path / name).exists():
            raise DatasetError(f"missing file {path / name}")
    meta = json.loads((path / "meta.json").read_text())
    n = int(meta["num_nodes"])
    if int(meta["feature_dim"]) != feature_dim:
        raise DatasetError(f"{path}: feature_dim {meta['feature_dim']} != suite {feature_dim}")
    edge_rows = [ln.split("\t") for ln in (path / "edges.tsv").read_text().splitlines() if ln.strip()]
    try:
        edges = np.array([[int(u), int(v)] for u, v in edge_rows], dtype=np.int64).reshape(-1, 2)
    except ValueError:
        raise DatasetError(f"{path / 'edges.tsv'}: expected 'u<TAB>v' integer pairs") from None
    feat_lines = [ln for ln in (path / "features.tsv").read_text().splitlines() if ln.strip()]
    if len(feat_lines) != n:
        raise DatasetError(f"{path}: features.tsv has {len(feat_lines)} rows, num_nodes is {n}")
    feats = np.array([[float(x) for x in ln.split("\t")] for ln in feat_lines], dtype=np.float64)
    if feats.shape[1] != feature_dim:
        raise DatasetError(f"{path}: features have {feats.shape[1]} columns, expected {feature_dim}")
    labels = None
    if with_labels:
        lp = path / "labels.tsv"
        if not lp.exists():
            raise DatasetError(f"missing file {lp}")
        labels = read_labels(lp, n, num_classes)
    return Graph(num_nodes=n, edges=edges, features=feats, labels=labels)


def save_domain_set(ds: DomainSet, root: Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    suite = {"num_sources": ds.num_sources, "num_classes": ds.num_classes,
             "feature_dim": ds.feature_dim}
    (root / "suite.json").write_text(json.dumps(suite, indent=2, sort_keys=True) + "\n")
    for k, g in enumerate(ds.sources):
        write_graph(g, root / f"source_{k}", ds.num_classes)
    write_graph(ds.target, root / "target", ds.num_classes, with_labels=False)


def load_domain_set(root: Path) -> DomainSet:
    root = Path(root)
    sp = root / "suite.json"
    if not sp.exists():
        raise DatasetError(f"missing file {sp}")
    suite = json.loads(sp.read_text())
    k, r, d = int(suite["num_sources"]), int(suite["num_classes"]), int(suite["feature_dim"])
    sources = [read_graph(root / f"source_{i}", r, d, with_labels=True) for i in range(k)]
    target = read_graph(root / "target", r, d, with_labels=False)
    return DomainSet(sources=sources, target=target, num_classes=r, feature_dim=d)
