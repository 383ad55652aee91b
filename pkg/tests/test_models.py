import numpy as np
import pytest

from selmag import tensor as tn
from selmag.config import TrainConfig
from selmag.graph import DomainSet, Graph
from selmag.models import (Classifier, Encoder, Hypothesis, ce_loss, classify, encode, encode_np,
                           load_params, predict_np, save_params, source_params,
                           source_result_from_params, train_pooled_model, train_source_models)
from selmag.synth import DomainGenParams, generate_domain
from selmag.tensor import finite_diff_grad, relative_error
from selmag.graph import split_labels


def path3():
    return Graph(3, [(0, 1), (1, 2)], [[1.0, 0.0], [0.5, 2.0], [0.0, 1.0]])


def test_identity_network_single_node():
    g = Graph(1, [], [[0.3, 1.2]])
    enc = Encoder(np.eye(2), np.zeros((1, 2)), np.eye(2), np.zeros((1, 2)))
    assert np.allclose(encode(enc, g).value, [[0.3, 1.2]])


def test_zero_features_zero_embeddings():
    rng = np.random.default_rng(0)
    enc = Encoder.init(2, 4, rng)
    g = Graph(3, [(0, 1)], np.zeros((3, 2)))
    assert np.array_equal(encode_np(enc, g), np.zeros((3, 4)))


def test_path_fixture_by_scalar_loops():
    g = path3()
    W1 = np.array([[0.1, -0.2, 0.3], [0.4, 0.1, -0.5]])
    b1 = np.array([[0.05, -0.1, 0.0]])
    W2 = np.array([[0.2, 0.1], [-0.3, 0.4], [0.5, -0.1]])
    b2 = np.array([[0.01, 0.02]])
    enc = Encoder(W1, b1, W2, b2)
    a = g.norm_adj
    f = g.features
    af = [[sum(a[i, k] * f[k, j] for k in range(3)) for j in range(2)] for i in range(3)]
    hid = [[max(0.0, sum(af[i][k] * W1[k, j] for k in range(2)) + b1[0, j]) for j in range(3)] for i in range(3)]
    ah = [[sum(a[i, k] * hid[k][j] for k in range(3)) for j in range(3)] for i in range(3)]
    out = [[sum(ah[i][k] * W2[k, j] for k in range(3)) + b2[0, j] for j in range(2)] for i in range(3)]
    assert np.allclose(encode(enc, g).value, out, atol=1e-14)
    assert np.allclose(encode_np(enc, g), out, atol=1e-14)


def test_classify_examples():
    zero = Classifier(np.zeros((2, 3)), np.zeros((1, 3)))
    assert np.allclose(classify(zero, np.ones((4, 2))).value, 1 / 3)
    sat = Classifier(np.eye(2), np.zeros((1, 2)))
    assert np.allclose(classify(sat, [[10.0, 0.0]]).value, [[0.9999546, 0.0000454]], atol=1e-7)
    rng = np.random.default_rng(0)
    c = Classifier.init(5, 4, rng)
    p = classify(c, rng.normal(size=(20, 5))).value
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9


def test_shape_mismatch():
    with pytest.raises(tn.TapeError):
        classify(Classifier(np.zeros((3, 2)), np.zeros((1, 2))), np.ones((2, 4)))
    with pytest.raises(tn.TapeError):
        encode(Encoder.init(3, 2, np.random.default_rng(0)), path3())


def test_ce_examples():
    assert ce_loss([[1.0, 0.0]], [0]).item() <= 1e-11
    assert np.isclose(ce_loss([[0.25, 0.75]], [1]).item(), -np.log(0.75))
    assert np.isclose(ce_loss(np.full((5, 4), 0.25), [0, 1, 2, 3, 1]).item(), np.log(4))
    with pytest.raises(ValueError):
        ce_loss([[0.5, 0.5]], [0], mask=[False])


def test_ce_classify_encode_gradients():
    rng = np.random.default_rng(4)
    g = Graph(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)], rng.normal(size=(5, 3)), [0, 1, 2, 1, 0],
              [True, True, False, True, True])
    enc = Encoder.init(3, 4, rng)
    cls = Classifier.init(4, 3, rng)
    base = {**{f"e{k}": v for k, v in enc.params().items()}, **{f"c{k}": v for k, v in cls.params().items()}}
    # nudge biases off zero so every path is exercised
    base = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in base.items()}

    def loss(p):
        e = Encoder(p["eW1"], p["eb1"], p["eW2"], p["eb2"])
        c = Classifier(p["cW"], p["cb"])
        return ce_loss(classify(c, encode(e, g)), g.labels, g.labeled_mask)

    params = {k: tn.param(v) for k, v in base.items()}
    store = tn.backward(loss(params))
    for k, v in base.items():
        def f(x, k=k):
            p = dict(base)
            p[k] = x
            return loss({kk: tn.const(vv) for kk, vv in p.items()}).item()
        assert relative_error(store[params[k]], finite_diff_grad(f, v)) < 1e-4, k


def test_permutation_equivariance():
    rng = np.random.default_rng(1)
    n = 6
    edges = [(0, 1), (1, 2), (2, 5), (3, 4), (4, 5)]
    feats = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    g = Graph(n, edges, feats)
    gp = Graph(n, [(inv[u], inv[v]) for u, v in edges], feats[perm])
    enc = Encoder.init(3, 4, rng)
    assert np.allclose(encode_np(enc, gp), encode_np(enc, g)[perm], atol=1e-12)


def separable_suite(seed=0, k=2):
    means = ((2.0, 0.0, 0.0), (-2.0, 0.0, 0.0))
    sources = []
    for i in range(k):
        p = DomainGenParams(num_nodes=60, num_classes=2, feature_dim=3, p_intra=0.2, p_inter=0.01,
                            class_means=means, noise_sigma=0.3, seed=seed * 10 + i)
        sources.append(split_labels(generate_domain(p), 0.3, i))
    target = generate_domain(DomainGenParams(num_nodes=60, num_classes=2, feature_dim=3,
                                             class_means=means, noise_sigma=0.3, seed=99)).without_labels()
    return DomainSet(sources, target, 2, 3)


def test_source_training_on_separable_suite():
    ds = separable_suite()
    cfg = TrainConfig(hidden_dim=8, source_epochs=200)
    res = train_source_models(ds, cfg)
    assert all(np.diff(res.losses[:10]) <= 0)
    for g, c in zip(ds.sources, res.classifiers):
        pred = predict_np(Hypothesis(res.encoder, c), g).argmax(axis=1)
        assert np.mean(pred[g.labeled_mask] == g.labels[g.labeled_mask]) >= 0.95


def test_zero_epochs_keeps_initialisation():
    ds = separable_suite()
    cfg = TrainConfig(hidden_dim=8)
    res = train_source_models(ds, cfg, epochs=0)
    rng = np.random.default_rng(cfg.seed)
    enc = Encoder.init(3, 8, rng)
    assert res.epochs == 0
    assert np.array_equal(res.encoder.W1, enc.W1) and np.array_equal(res.encoder.W2, enc.W2)


def test_classifier_gradients_are_separate():
    rng = np.random.default_rng(2)
    ds = separable_suite()
    enc = Encoder.init(3, 4, rng)
    c0, c1 = (Classifier(tn.param(rng.normal(size=(4, 2))), tn.param(np.zeros((1, 2)))) for _ in range(2))
    g = ds.sources[0]
    store = tn.backward(ce_loss(classify(c0, encode(enc, g)), g.labels, g.labeled_mask))
    assert store[c0.W].any()
    assert not store[c1.W].any() and not store[c1.b].any()


def test_pooled_model_trains():
    ds = separable_suite()
    hyp = train_pooled_model(ds, TrainConfig(hidden_dim=8, source_epochs=100))
    acc = np.mean(predict_np(hyp, ds.sources[0]).argmax(1) == ds.sources[0].labels)
    assert acc >= 0.9


def test_checkpoint_round_trip(tmp_path):
    ds = separable_suite()
    res = train_source_models(ds, TrainConfig(hidden_dim=4), epochs=3)
    save_params(tmp_path / "m.json", source_params(res))
    back = source_result_from_params(load_params(tmp_path / "m.json"))
    for k, v in source_params(res).items():
        assert np.array_equal(source_params(back)[k], v)
    (tmp_path / "bad.json").write_text('{"format": "other", "params": {}}')
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.json")
