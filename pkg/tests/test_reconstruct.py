import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from invlab.core import EmbeddingBatch, ImageSample, minmax_fit
from invlab.errors import ConfigError, LayerError, LengthMismatch, SpecError, TrainError
from invlab.lipschitz import network_lipschitz_bound, verify_bound
from invlab.reconstruct import (LossConfig, ReconstructorHandle, ReconstructorSpec, TrainConfig, autoencode,
                                build_reconstructor, mean_image, normalize_layer_weights, reconstruct,
                                reconstruction_loss, search_layer_subset, train_reconstructor,
                                validate_candidates)

from conftest import rand_image, tiny_spec


@pytest.fixture(scope="module")
def phi128(small_faces):
    from invlab.zoo import train_extractor
    return train_extractor(tiny_spec("tiny128", length=128), small_faces, seed=0, epochs=1)


@pytest.fixture(scope="module")
def trained_g(phi128, small_faces):
    g = build_reconstructor(ReconstructorSpec(128, 8), seed=0)
    loss = LossConfig(1.0, ("conv1", "conv2"))
    return train_reconstructor(g, phi128, small_faces, loss, TrainConfig(epochs=4, batch_size=8), "emb")


def test_layouts_match_reference_shapes():
    rows = ReconstructorSpec(2048).layers()
    assert [r[0] for r in rows] == ["dense", "reshape"] + ["transpose_conv"] * 4
    assert [r[2] for r in rows] == [(16384,), (4, 4, 1024), (8, 8, 512), (16, 16, 256), (32, 32, 128), (64, 64, 3)]
    assert all(r[1]["kernel"] == 5 and r[1]["stride"] == 2 for r in rows[2:])
    rows = ReconstructorSpec(128).layers()
    assert [r[2] for r in rows] == [(4096,), (4, 4, 256), (8, 8, 128), (16, 16, 64), (32, 32, 32), (64, 64, 3)]
    thin = ReconstructorSpec(2048, 4).layers()
    assert thin[1][2] == (4, 4, 256) and thin[-1][2] == (64, 64, 3)


def test_spec_errors():
    with pytest.raises(SpecError):
        ReconstructorSpec(100)
    with pytest.raises(SpecError):
        ReconstructorSpec(128, 0)


def test_forward_shape_and_seed_determinism():
    a = build_reconstructor(ReconstructorSpec(128, 4), seed=5)
    b = build_reconstructor(ReconstructorSpec(128, 4), seed=5)
    c = build_reconstructor(ReconstructorSpec(128, 4), seed=6)
    z = np.random.default_rng(0).random((3, 128))
    out = a.decode(z)
    assert out.shape == (3, 64, 64, 3) and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, b.decode(z))
    assert not np.array_equal(out, c.decode(z))


def test_loss_identity_and_pixel_only(phi128):
    rng = np.random.default_rng(0)
    x, y = rand_image(rng), rand_image(rng)
    cfg = LossConfig(1.0, ("conv1", "emb"))
    assert reconstruction_loss(x, x, phi128, cfg) == 0.0
    pixel_only = LossConfig(0.7)
    expected = 0.7 * np.linalg.norm(x.pixels.astype(np.float64) - y.pixels)
    assert math.isclose(reconstruction_loss(x, y, phi128, pixel_only), expected, rel_tol=1e-5)
    sq = LossConfig(1.0, squared=True)
    assert math.isclose(reconstruction_loss(x, y, phi128, sq), np.sum((x.pixels - y.pixels) ** 2), rel_tol=1e-5)


def test_loss_perceptual_oracle(phi128):
    rng = np.random.default_rng(1)
    x, y = rand_image(rng), rand_image(rng)
    layers, weights = ("conv1", "conv2", "emb"), (0.2, 0.3, 0.5)
    cfg = LossConfig(0.4, layers, weights)
    expected = 0.4 * np.linalg.norm(x.pixels.astype(np.float64) - y.pixels)
    for l, w in zip(layers, weights):
        fx = phi128.embed([x], l)[0].astype(np.float64)
        fy = phi128.embed([y], l)[0].astype(np.float64)
        expected += w * np.linalg.norm(fx - fy)
    assert math.isclose(reconstruction_loss(x, y, phi128, cfg), expected, rel_tol=1e-4)


def test_loss_errors(phi128):
    rng = np.random.default_rng(0)
    with pytest.raises(LengthMismatch):
        reconstruction_loss(rand_image(rng), rand_image(rng, 32, 32), phi128, LossConfig())
    with pytest.raises(LayerError):
        reconstruction_loss(rand_image(rng), rand_image(rng), phi128, LossConfig(1.0, ("nope",)))
    with pytest.raises(ConfigError):
        LossConfig(1.0, ("a", "b"), (1.0,))
    with pytest.raises(ConfigError):
        LossConfig(-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


def test_normalize_layer_weights_examples():
    w = normalize_layer_weights({"a": 1.0, "b": 3.0})
    assert math.isclose(w["a"], 0.75) and math.isclose(w["b"], 0.25)
    w = normalize_layer_weights({"a": 0.0, "b": 2.0, "c": 2.0}, {"a": 0.2, "b": 0.4, "c": 0.4})
    assert w["a"] == 0.2 and math.isclose(w["b"], 0.4) and math.isclose(w["c"], 0.4)
    assert normalize_layer_weights({}) == {}


@settings(max_examples=50)
@given(st.dictionaries(st.sampled_from("abcdef"), st.floats(1e-3, 1e3), min_size=1))
def test_normalized_weights_sum_to_one_and_equalize(mags):
    w = normalize_layer_weights(mags)
    assert math.isclose(sum(w.values()), 1.0, rel_tol=1e-9)
    contrib = [w[l] * mags[l] for l in mags]
    assert max(contrib) - min(contrib) < 1e-9 * max(contrib) + 1e-12


def test_training_trace_equalizes_layer_contributions(trained_g):
    trace = trained_g.trace
    assert len(trace) == 4
    last = trace[-1]
    w = normalize_layer_weights(last["magnitudes"], last["weights"])
    contrib = [w[l] * last["magnitudes"][l] for l in w]
    assert max(contrib) == pytest.approx(min(contrib), rel=1e-9)
    assert trained_g.meta["loss"]["layers"] == ["conv1", "conv2"]


def test_training_reduces_loss_and_freezes_phi(phi128, small_faces):
    before = phi128.current_checksum()
    g = build_reconstructor(ReconstructorSpec(128, 8), seed=0)
    out = train_reconstructor(g, phi128, small_faces, LossConfig(1.0), TrainConfig(epochs=6, batch_size=8))
    losses = [t["loss"] for t in out.trace]
    assert losses[-1] < losses[0]
    assert phi128.current_checksum() == before == out.meta["phi_checksum"]
    # the input handle is not modified
    z = np.random.default_rng(0).random((2, 128))
    np.testing.assert_array_equal(g.decode(z), build_reconstructor(ReconstructorSpec(128, 8), seed=0).decode(z))


def test_training_divergence_raises(phi128, small_faces):
    g = build_reconstructor(ReconstructorSpec(128, 8), seed=0)
    with torch.no_grad():
        g.net[0].weight.fill_(float("nan"))
    with pytest.raises(TrainError) as info:
        train_reconstructor(g, phi128, small_faces, LossConfig(), TrainConfig(epochs=2, batch_size=8))
    assert info.value.trace[-1]["epoch"] == 0


def test_training_input_errors(phi128, small_faces, tiny_phi):
    g = build_reconstructor(ReconstructorSpec(128, 8))
    with pytest.raises(LengthMismatch):
        train_reconstructor(g, tiny_phi, small_faces, LossConfig(), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train_reconstructor(g, phi128, small_faces, LossConfig(), TrainConfig(epochs=1), mode="gan")


def test_reconstruct_deterministic_and_typed(trained_g, phi128, small_faces, tmp_path):
    emb = phi128.embed(small_faces[:4], "emb")
    a, b = reconstruct(trained_g, emb), reconstruct(trained_g, emb)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 64, 64, 3)
    batch = EmbeddingBatch(emb, "tiny128", "emb", [s.subject_id for s in small_faces[:4]],
                           [s.sample_id for s in small_faces[:4]])
    imgs = reconstruct(trained_g, batch)
    assert isinstance(imgs[0], ImageSample) and imgs[0].subject_id == small_faces[0].subject_id
    assert isinstance(reconstruct(trained_g, batch[0]), ImageSample)
    own = reconstruct(trained_g, emb, minmax_fit(emb))
    assert own.shape == a.shape
    with pytest.raises(LengthMismatch):
        reconstruct(trained_g, np.zeros((1, 64)))
    trained_g.save(tmp_path / "g")
    back = ReconstructorHandle.load(tmp_path / "g")
    np.testing.assert_array_equal(reconstruct(back, emb), a)


def test_autoencoder_mode_and_baselines(phi128, small_faces):
    g = build_reconstructor(ReconstructorSpec(128, 8))
    with pytest.raises(ConfigError):
        autoencode(g, small_faces)
    before = phi128.current_checksum()
    ae = train_reconstructor(g, phi128, small_faces, LossConfig(1.0, ("conv1",)),
                             TrainConfig(epochs=2, batch_size=8), mode="autoencoder")
    assert phi128.current_checksum() == before
    out = autoencode(ae, small_faces[:3])
    assert len(out) == 3 and out[0].shape == (64, 64, 3)
    m = mean_image(small_faces)
    np.testing.assert_allclose(m, np.mean([s.pixels for s in small_faces], axis=0), atol=1e-6)


def test_layer_subset_search(phi128, small_faces):
    g = build_reconstructor(ReconstructorSpec(128, 8))
    cfg, tc = LossConfig(1.0), TrainConfig(epochs=10, batch_size=8)
    best, scores = search_layer_subset(g, phi128, [("conv1",)], small_faces, small_faces, cfg, tc)
    assert best == ("conv1",) and len(scores) == 1
    best, scores = search_layer_subset(g, phi128, [("conv1", "conv2"), ("conv2",)], small_faces[:12],
                                       small_faces[:12], cfg, tc)
    assert best in (("conv1", "conv2"), ("conv2",)) and len(scores) == 2
    top = max(s for _, s in scores)
    tied = [c for c, s in scores if s == top]
    assert best == min(tied, key=len)
    with pytest.raises(ConfigError):
        validate_candidates(phi128, [])
    with pytest.raises(LayerError):
        validate_candidates(phi128, [("missing",)])


def test_lipschitz_bound_holds_for_trained_reconstructor(trained_g):
    bound = network_lipschitz_bound(trained_g)
    res = verify_bound(trained_g, bound.L, probes=300)
    assert res["violations"] == 0 and 0 < res["tightness"] <= 1
