"""Seeded stochastic-block-model domains with controllable distribution shift."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import DomainSet, Graph, save_domain_set, write_labels


@dataclass(frozen=True)
class DomainGenParams:
    num_nodes: int = 300
    num_classes: int = 4
    feature_dim: int = 16
    p_intra: float = 0.08
    p_inter: float = 0.01
    class_means: tuple | None = None
    noise_sigma: float = 0.5
    feature_rotation_angle: float = 0.0
    feature_translation: float = 0.0
    rotation_plane: tuple | None = None
    label_flip_ratio: float = 0.0
    class_proportions: tuple | None = None
    seed: int = 0

    @property
    def num_blocks(self) -> int:
        return self.num_classes

    def validate(self) -> None:
        if self.num_classes <= 0 or self.feature_dim <= 0 or self.num_nodes <= 0:
            raise ValueError("num_nodes, num_classes and feature_dim must be positive")
        if not 0.0 <= self.p_inter <= self.p_intra <= 1.0:
            raise ValueError("need 0 <= p_inter <= p_intra <= 1")
        if not 0.0 <= self.label_flip_ratio < 0.5:
            raise ValueError("label_flip_ratio must lie in [0, 0.5)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.class_means is not None:
            m = np.asarray(self.class_means)
            if m.shape != (self.num_classes, self.feature_dim):
                raise ValueError(f"class_means shape {m.shape} != ({self.num_classes}, {self.feature_dim})")
        if self.class_proportions is not None:
            p = np.asarray(self.class_proportions, dtype=float)
            if p.shape != (self.num_classes,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("class_proportions must be a probability vector over classes")


@dataclass
class ShiftSchedule:
    """Per-domain overrides of the base parameters: ``K`` sources then the target."""

    sources: list[dict] = field(default_factory=list)
    target: dict = field(default_factory=dict)

    def validate(self) -> None:
        if len(self.sources) < 1:
            raise ValueError("schedule needs at least one source entry")


def _allocate(n: int, props: np.ndarray) -> np.ndarray:
    """Largest-remainder class counts summing to ``n``."""
    raw = props * n
    counts = np.floor(raw).astype(np.int64)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def rotate_in_plane(x: np.ndarray, plane: np.ndarray, angle: float) -> np.ndarray:
    p1, p2 = plane
    a = x @ p1
    b = x @ p2
    c, s = np.cos(angle), np.sin(angle)
    return x + np.outer(a * c - b * s - a, p1) + np.outer(a * s + b * c - b, p2)


def random_plane(feature_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim, 2)))
    return q.T.copy()


def circular_class_means(num_classes: int, plane: np.ndarray, radius: float,
                         offplane_sigma: float, seed: int) -> np.ndarray:
    """Class means spread evenly on a circle in ``plane`` plus small off-plane parts."""
    rng = np.random.default_rng(seed)
    d = plane.shape[1]
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = radius * (np.outer(np.cos(angles), plane[0]) + np.outer(np.sin(angles), plane[1]))
    off = rng.standard_normal((num_classes, d)) * offplane_sigma
    off -= np.outer(off @ plane[0], plane[0]) + np.outer(off @ plane[1], plane[1])
    return means + off


def generate_domain(params: DomainGenParams) -> Graph:
    params.validate()
    rng = np.random.default_rng(params.seed)
    n, r, d = params.num_nodes, params.num_classes, params.feature_dim
    props = (np.full(r, 1.0 / r) if params.class_proportions is None
             else np.asarray(params.class_proportions, dtype=float))
    y = np.repeat(np.arange(r), _allocate(n, props))
    rng.shuffle(y)

    same = y[:, None] == y[None, :]
    prob = np.where(same, params.p_intra, params.p_inter)
    draw = rng.random((n, n))
    iu, ju = np.triu_indices(n, k=1)
    keep = draw[iu, ju] < prob[iu, ju]
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    means = (np.zeros((r, d)) if params.class_means is None
             else np.asarray(params.class_means, dtype=float))
    feats = means[y] + rng.standard_normal((n, d)) * params.noise_sigma
    if params.feature_rotation_angle != 0.0 or params.feature_translation != 0.0:
        plane = (random_plane(d, params.seed) if params.rotation_plane is None
                 else np.asarray(params.rotation_plane, dtype=float))
        feats = rotate_in_plane(feats, plane, params.feature_rotation_angle)
        feats = feats + params.feature_translation * plane[0]

    labels = y.copy()
    if params.label_flip_ratio > 0:
        flip = rng.random(n) < params.label_flip_ratio
        offset = rng.integers(1, r, size=n) if r > 1 else np.zeros(n, dtype=np.int64)
        labels[flip] = (labels[flip] + offset[flip]) % r
    return Graph(num_nodes=n, edges=edges, features=feats, labels=labels)


def default_base_params(seed: int = 0, num_nodes: int = 300, num_classes: int = 4,
                        feature_dim: int = 16, mean_radius: float = 0.8,
                        offplane_sigma: float = 0.0) -> DomainGenParams:
    plane = random_plane(feature_dim, seed + 7919)
    means = circular_class_means(num_classes, plane, mean_radius, offplane_sigma, seed + 104729)
    return DomainGenParams(
        num_nodes=num_nodes, num_classes=num_classes, feature_dim=feature_dim,
        p_intra=0.08, p_inter=0.01, noise_sigma=0.5,
        class_means=tuple(map(tuple, means)), rotation_plane=tuple(map(tuple, plane)),
        seed=seed,
    )


def default_schedule(num_sources: int = 5, max_angle: float = 1.2, min_angle: float = 0.6,
                     max_translation: float = 1.0) -> ShiftSchedule:
    """Source 0 shares the target's distribution; the others are rotated by
    ``min_angle`` up to ``max_angle``, translated in proportion to their angle,
    and lose homophily progressively."""
    sources: list[dict] = [{}]
    far = num_sources - 1
    for k in range(1, num_sources):
        frac = k / far
        step = (k - 1) / (far - 1) if far > 1 else 1.0
        angle = min_angle + (max_angle - min_angle) * step
        sources.append({
            "feature_rotation_angle": round(angle, 10),
            "feature_translation": round(max_translation * angle / max_angle, 10) if max_angle else 0.0,
            "p_intra": round(0.08 - 0.03 * frac, 10),
            "p_inter": round(0.01 + 0.015 * frac, 10),
        })
    return ShiftSchedule(sources=sources, target={})


def _domain_params(base: DomainGenParams, override: dict, seed: int) -> DomainGenParams:
    override = dict(override)
    override.setdefault("seed", seed)
    for key in ("class_means", "rotation_plane", "class_proportions"):
        if key in override and override[key] is not None:
            override[key] = tuple(map(tuple, np.atleast_2d(override[key]))) if key != "class_proportions" \
                else tuple(float(x) for x in override[key])
    return replace(base, **override)


def suite_params(schedule: ShiftSchedule, base: DomainGenParams) -> tuple[list[DomainGenParams], DomainGenParams]:
    schedule.validate()
    k = len(schedule.sources)
    sources = [_domain_params(base, o, base.seed * 1000 + i + 1) for i, o in enumerate(schedule.sources)]
    target = _domain_params(base, schedule.target, base.seed * 1000 + k + 1)
    return sources, target


def _jsonable(params: DomainGenParams) -> dict:
    out = asdict(params)
    for key in ("class_means", "rotation_plane"):
        if out[key] is not None:
            out[key] = [list(row) for row in out[key]]
    if out["class_proportions"] is not None:
        out["class_proportions"] = list(out["class_proportions"])
    return out


def generate_suite(schedule: ShiftSchedule, base: DomainGenParams,
                   out_dir: Path | None = None) -> tuple[DomainSet, dict, np.ndarray]:
    """Build ``K`` labeled sources and an unlabeled target.

    Returns the domain set (target labels stripped), the manifest, and the
    target's hidden labels. When ``out_dir`` is given the suite is written in
    the dataset format, with the hidden labels kept at the suite root in
    ``target_labels_eval.tsv``, never under ``target/``.
    """
    src_params, tgt_params = suite_params(schedule, base)
    sources = [generate_domain(p) for p in src_params]
    target_full = generate_domain(tgt_params)
    ds = DomainSet(sources=sources, target=target_full.without_labels(),
                   num_classes=base.num_classes, feature_dim=base.feature_dim)
    manifest = {
        "num_sources": len(sources),
        "num_classes": base.num_classes,
        "feature_dim": base.feature_dim,
        "base": _jsonable(base),
        "schedule": {"sources": schedule.sources, "target": schedule.target},
        "sources": [_jsonable(p) for p in src_params],
        "target": _jsonable(tgt_params),
        "near_source": 0,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_domain_set(ds, out_dir)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        write_labels(out_dir / "target_labels_eval.tsv", target_full.labels)
    return ds, manifest, target_full.labels
