import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.metrics import silhouette_score

from invlab.core import EmbeddingBatch, minmax_transform
from invlab.errors import ConfigError, DataError, LengthMismatch
from invlab.inference import (AttributeSchema, AuxiliaryClassifier, AuxiliaryClassifierSpec, ClassifierRouter,
                              attribute_features, block_shuffle, predict_model, predict_stream, project_2d,
                              train_attribute_predictor, train_auxiliary_classifier)

SMALL = dict(hidden=(32,), epochs=40, batch_size=32, lr=1e-2, patience=10)


def _blobs(k=3, n=200, length=8, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    return {(f"m{i}", "emb"): rng.normal(sep * i, 1.0, (n, length)) for i in range(k)}


def test_spec_errors():
    with pytest.raises(ConfigError):
        AuxiliaryClassifierSpec(0, (("a", "x"), ("b", "x")))
    with pytest.raises(ConfigError):
        AuxiliaryClassifierSpec(4, (("a", "x"),))
    with pytest.raises(ConfigError):
        AuxiliaryClassifierSpec(4, (("a", "x"), ("a", "x")))
    assert AuxiliaryClassifierSpec(4, ("a:x", "b:y")).labels == ["a:x", "b:y"]


def test_separable_classes_learned_and_scores_sum_to_one():
    data = _blobs()
    spec = AuxiliaryClassifierSpec(8, tuple(data), **SMALL)
    clf = train_auxiliary_classifier(data, spec)
    assert clf.heldout_accuracy > 0.95
    s = clf.scores(np.random.default_rng(1).normal(4, 3, (50, 8)))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert (s >= 0).all()
    pred = predict_model(clf, np.zeros(8))
    assert pred.prediction == ("m0", "emb")
    assert abs(sum(pred.scores) - 1) < 1e-6


def test_indistinguishable_classes_near_chance():
    rng = np.random.default_rng(0)
    same = rng.normal(0, 1, (600, 8))
    data = {("a", "emb"): same[:300], ("b", "emb"): same[300:]}
    clf = train_auxiliary_classifier(data, AuxiliaryClassifierSpec(8, tuple(data), **SMALL))
    assert abs(clf.heldout_accuracy - 0.5) < 0.12


def test_normalization_applied_exactly_once():
    data = _blobs(2, 100, 4)
    clf = train_auxiliary_classifier(data, AuxiliaryClassifierSpec(4, tuple(data), **SMALL))
    raw = np.random.default_rng(2).normal(2, 2, (10, 4))
    with torch.no_grad():
        manual = torch.softmax(clf.net(torch.from_numpy(minmax_transform(raw, clf.params)).float()), 1).numpy()
    np.testing.assert_allclose(clf.scores(raw), manual, atol=1e-6)


def test_data_and_length_errors():
    data = _blobs(2, 50, 4)
    with pytest.raises(DataError):
        train_auxiliary_classifier(data, AuxiliaryClassifierSpec(4, (("m0", "emb"), ("zz", "emb")), **SMALL))
    with pytest.raises(LengthMismatch):
        train_auxiliary_classifier(data, AuxiliaryClassifierSpec(5, tuple(data), **SMALL))
    clf = train_auxiliary_classifier(data, AuxiliaryClassifierSpec(4, tuple(data), **SMALL))
    with pytest.raises(LengthMismatch):
        clf.scores(np.zeros((1, 7)))


def test_save_load_and_router(tmp_path):
    d4, d6 = _blobs(2, 60, 4), _blobs(2, 60, 6)
    c4 = train_auxiliary_classifier(d4, AuxiliaryClassifierSpec(4, tuple(d4), **SMALL))
    c6 = train_auxiliary_classifier(d6, AuxiliaryClassifierSpec(6, tuple(d6), **SMALL))
    c4.save(tmp_path / "c4")
    back = AuxiliaryClassifier.load(tmp_path / "c4")
    assert back.classifier_id == c4.classifier_id
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(back.scores(x), c4.scores(x), atol=1e-7)
    router = ClassifierRouter([c4, c6])
    assert router.lengths == [4, 6]
    assert router.route(np.zeros(6)) is c6
    assert router.predict(np.zeros(4)).classifier_id == c4.classifier_id
    with pytest.raises(LengthMismatch):
        router.route(np.zeros(5))
    with pytest.raises(ConfigError):
        router.add(c4)


def test_predict_stream_plurality():
    data = _blobs(3, 100, 4)
    clf = train_auxiliary_classifier(data, AuxiliaryClassifierSpec(4, tuple(data), **SMALL))
    stream = np.concatenate([np.full((7, 4), 8.0), np.full((3, 4), 0.0)])
    label, idx = predict_stream(clf, stream)
    assert label == ("m2", "emb") and len(idx) == 10


@settings(max_examples=30)
@given(st.integers(2, 6), st.integers(1, 12), st.integers(0, 1000))
def test_block_shuffle_balanced_and_blockwise(k, blocks_per_class, seed):
    y = np.repeat(np.arange(k), blocks_per_class * 3)
    blocks = np.array([f"{c}-{i // 3}" for c in range(k) for i in range(blocks_per_class * 3)])
    out = block_shuffle(y, blocks, k, np.random.default_rng(seed))
    assert set(out.tolist()) <= set(range(k))
    for b in np.unique(blocks):
        assert len(set(out[blocks == b].tolist())) == 1
    counts = np.bincount(out, minlength=k) // 3
    assert counts.max() - counts.min() <= 1


def _labeled(n_models=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_models):
        act = ["relu", "tanh"][i % 2]
        vec = rng.normal(size=(100, 16))
        vec = np.maximum(vec, 0) if act == "relu" else np.tanh(vec)
        out.append((EmbeddingBatch(vec[:, rng.permutation(16)], f"m{i}", "emb"), {"activation": act}))
    return out


def test_attribute_predictor_generalizes_to_held_out_models():
    schema = AttributeSchema({"activation": ["relu", "tanh"]})
    pred = train_attribute_predictor(_labeled(), schema, hidden=(32,), heldout_models=["m0", "m1"], epochs=40)
    assert pred.heldout_models == ("m0", "m1")
    assert pred.heldout_accuracy["activation"] > 0.9
    assert pred.chance["activation"] == 0.5
    assert set(pred.predict(np.zeros((3, 16)))["activation"]) <= {"relu", "tanh"}


def test_attribute_errors():
    with pytest.raises(DataError):
        AttributeSchema({"activation": ["relu"]})
    schema = AttributeSchema({"activation": ["relu", "tanh"]})
    labeled = _labeled(4)
    with pytest.raises(DataError):
        train_attribute_predictor([], schema)
    with pytest.raises(DataError):
        train_attribute_predictor([(b, {}) for b, _ in labeled], schema)
    with pytest.raises(DataError):
        train_attribute_predictor(labeled, schema, heldout_models=["m0", "m2"])
    with pytest.raises(DataError):
        train_attribute_predictor(labeled, schema, heldout_models=["nope"])
    with pytest.raises(ConfigError):
        attribute_features(np.zeros((2, 3)), "fancy")


def test_sorted_features_are_permutation_invariant():
    x = np.random.default_rng(0).normal(size=(4, 9))
    np.testing.assert_array_equal(attribute_features(x), attribute_features(x[:, ::-1]))
    np.testing.assert_array_equal(attribute_features(x, "raw"), x)


def test_project_2d_properties():
    x = np.random.default_rng(0).normal(size=(30, 5))
    pts = project_2d(x, model_ids=["a"] * 30)
    assert len(pts) == 30 and pts[0][2] == "a"
    xy = np.array([p[:2] for p in pts])
    np.testing.assert_allclose(xy.mean(axis=0), 0, atol=1e-9)
    # a 2-D input is reproduced up to rotation: pairwise distances preserved
    flat = np.c_[x[:, :2], np.zeros((30, 3))]
    xy2 = np.array([p[:2] for p in project_2d(flat)])
    d = lambda z: np.linalg.norm(z[:, None] - z[None], axis=-1)
    np.testing.assert_allclose(d(xy2), d(flat), atol=1e-9)
    with pytest.raises(DataError):
        project_2d(np.zeros((1, 3)))


@pytest.mark.slow
def test_pool_embeddings_cluster_by_model(desk_run):
    _, art = desk_run
    images = art["datasets"]["attacker"][:300]
    batches = [EmbeddingBatch(h.embed(images, "emb"), mid, "emb") for mid, h in art["pool"].items()]
    pts = project_2d(batches)
    xy = np.array([p[:2] for p in pts])
    assert silhouette_score(xy, [p[2] for p in pts]) > 0


@pytest.mark.slow
def test_desk_run_infers_the_target_model(desk_run):
    report, art = desk_run
    assert art["aux"].heldout_accuracy >= 0.8
    assert report.extra["phi_hat"].startswith("cnn-a")
    assert report.extra["phi_hat_fraction_true"] >= 0.8
