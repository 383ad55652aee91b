import json

import numpy as np
import pytest

from selmag.synth import (DomainGenParams, ShiftSchedule, default_base_params, default_schedule,
                          generate_domain, generate_suite, rotate_in_plane)


def test_extreme_sbm_gives_disjoint_cliques():
    g = generate_domain(DomainGenParams(num_nodes=4, num_classes=2, feature_dim=2, p_intra=1.0,
                                        p_inter=0.0, seed=3))
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    assert len(g.edges) == 2 and same.all()


def test_noiseless_features_equal_class_means():
    means = ((1.0, 2.0), (-1.0, 0.5), (0.0, -3.0))
    g = generate_domain(DomainGenParams(num_nodes=30, num_classes=3, feature_dim=2, noise_sigma=0.0,
                                        class_means=means, seed=1))
    assert np.array_equal(g.features, np.asarray(means)[g.labels])


def test_intra_class_density_matches_probability():
    dens = []
    for seed in range(20):
        p = DomainGenParams(num_nodes=200, num_classes=4, feature_dim=2, p_intra=0.1, p_inter=0.01,
                            seed=seed)
        g = generate_domain(p)
        y = g.labels
        same_pairs = sum(c * (c - 1) / 2 for c in np.bincount(y))
        intra = np.sum(y[g.edges[:, 0]] == y[g.edges[:, 1]])
        dens.append(intra / same_pairs)
    assert abs(np.mean(dens) - 0.1) < 0.05


def test_rotation_is_an_isometry_in_the_plane():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(5, 2)))
    x = rng.normal(size=(10, 5))
    y = rotate_in_plane(x, q.T, 0.7)
    assert np.allclose(np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1))
    assert np.allclose(rotate_in_plane(y, q.T, -0.7), x)


def test_label_flip_rate():
    base = dict(num_nodes=4000, num_classes=3, feature_dim=2, seed=5)
    clean = generate_domain(DomainGenParams(**base))
    noisy = generate_domain(DomainGenParams(**base, label_flip_ratio=0.2))
    assert np.array_equal(clean.features, noisy.features)
    assert abs(np.mean(noisy.labels != clean.labels) - 0.2) < 0.03


@pytest.mark.parametrize("bad", [dict(num_classes=0), dict(feature_dim=0), dict(p_inter=0.5, p_intra=0.1),
                                 dict(label_flip_ratio=0.5), dict(noise_sigma=-1.0)])
def test_degenerate_params(bad):
    with pytest.raises(ValueError):
        generate_domain(DomainGenParams(**bad))


def test_suite_layout_and_determinism(tmp_path):
    sched, base = default_schedule(), default_base_params(seed=2, num_nodes=60)
    ds, manifest, labels = generate_suite(sched, base, tmp_path / "a")
    generate_suite(sched, base, tmp_path / "b")
    dirs = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert dirs == ["source_0", "source_1", "source_2", "source_3", "source_4", "target"]
    assert not (tmp_path / "a" / "target" / "labels.tsv").exists()
    assert (tmp_path / "a" / "target_labels_eval.tsv").exists()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["num_sources"] == 5
    assert ds.target.labels is None and len(labels) == 60
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_near_source_shares_target_distribution():
    sched = default_schedule()
    assert sched.sources[0] == {} and sched.target == {}
    angles = [s.get("feature_rotation_angle", 0.0) for s in sched.sources]
    assert angles == sorted(angles) and angles[0] == 0.0
    _, manifest, _ = generate_suite(sched, default_base_params(seed=0, num_nodes=40))
    src0, tgt = dict(manifest["sources"][0]), dict(manifest["target"])
    src0.pop("seed"), tgt.pop("seed")
    assert src0 == tgt


def test_schedule_needs_sources():
    with pytest.raises(ValueError):
        generate_suite(ShiftSchedule(sources=[]), default_base_params())
