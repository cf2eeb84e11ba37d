import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from invlab import synth
from invlab.core import DataCondition, ImageSample, Modality
from invlab.dataio import (AugmentationPolicy, DatasetManifest, Pipeline, apply_preprocessing, augment,
                           load_dataset, preprocess_many, resolve_condition, split_disjoint, synthetic_faces,
                           write_dataset)
from invlab.errors import FormatError, IngestError, PolicyError, SplitError

from conftest import rand_image


def _write_pngs(root, n=10, mode="RGB", size=(40, 50)):
    rng = np.random.default_rng(0)
    files = []
    for i in range(n):
        shape = (size[1], size[0], 3) if mode == "RGB" else (size[1], size[0])
        Image.fromarray(rng.integers(0, 256, shape, dtype=np.uint8), mode).save(root / f"img{i}.png")
        files.append(f"img{i}.png")
    (root / "manifest.json").write_text(json.dumps(
        {"modality": "face", "image_size": [64, 64], "preprocessing_tag": "raw",
         "subjects": [{"id": "a", "files": files[: n // 2]}, {"id": "b", "files": files[n // 2:]}]}))
    return root / "manifest.json"


def test_load_dataset_shapes_and_range(tmp_path):
    samples = load_dataset(DatasetManifest.read(_write_pngs(tmp_path)), (64, 64))
    assert len(samples) == 10
    for s in samples:
        assert s.shape == (64, 64, 3)
        assert 0.0 <= s.pixels.min() and s.pixels.max() <= 1.0


def test_load_dataset_grayscale_replicated(tmp_path):
    samples = load_dataset(DatasetManifest.read(_write_pngs(tmp_path, 2, "L")), (64, 64), channels=3)
    px = samples[0].pixels
    np.testing.assert_array_equal(px[..., 0], px[..., 1])
    np.testing.assert_array_equal(px[..., 0], px[..., 2])


def test_load_dataset_errors(tmp_path):
    manifest = _write_pngs(tmp_path, 2)
    (tmp_path / "img1.png").unlink()
    with pytest.raises(IngestError) as info:
        load_dataset(DatasetManifest.read(manifest))
    assert "img1.png" in str(info.value)
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "img1.png", format="JPEG")
    with pytest.raises(FormatError):
        load_dataset(DatasetManifest.read(manifest))


def test_write_then_load_round_trip(tmp_path, small_faces):
    write_dataset(small_faces[:8], tmp_path / "ds")
    back = load_dataset(DatasetManifest.read(tmp_path / "ds" / "manifest.json"))
    assert len(back) == 8
    diff = np.abs(np.stack([s.pixels for s in back]) - np.stack([s.pixels for s in small_faces[:8]]))
    assert diff.max() <= 0.5 / 255 + 1e-6


def test_augment_multiplier_fifty():
    img = synth.render_fingerprint(0, 0, 0)
    out = augment(img, AugmentationPolicy(multiplier=50, seed=3))
    assert len(out) == 50
    assert len({o.sample_id for o in out}) == 50


def test_augment_identity_policy():
    img = rand_image(np.random.default_rng(1))
    policy = AugmentationPolicy(0, 0, (0, 0), (0, 0), (0, 0), multiplier=1)
    (out,) = augment(img, policy, Modality.FACE)
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_augment_deterministic_and_errors():
    img = synth.render_fingerprint(0, 1, 2)
    policy = AugmentationPolicy(multiplier=4, seed=7)
    a, b = augment(img, policy), augment(img, policy)
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
    with pytest.raises(PolicyError):
        augment(img, AugmentationPolicy(crop_range=(0.0, 1.0)))
    with pytest.raises(PolicyError):
        AugmentationPolicy(rotation=-1)
    with pytest.raises(PolicyError):
        AugmentationPolicy(multiplier=0)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31), st.floats(0, 30), st.floats(0, 8), st.integers(1, 3))
def test_augment_pure_function_of_seed(seed, rot, shift, mult):
    img = rand_image(np.random.default_rng(seed % 97), 32, 32, 1)
    policy = AugmentationPolicy(rot, shift, (0, 0.2), (0, 2), (2, 5), mult, seed)
    a, b = augment(img, policy), augment(img, policy)
    assert [x.pixels.tobytes() for x in a] == [x.pixels.tobytes() for x in b]
    assert all(0 <= x.pixels.min() and x.pixels.max() <= 1 for x in a)


def test_preprocessing_tags_differ():
    raw = synth.render_face(0, 3, 1)
    a, b = apply_preprocessing(raw, Pipeline.A), apply_preprocessing(raw, Pipeline.B)
    assert a.preprocessing_tag == "A" and b.preprocessing_tag == "B"
    assert np.abs(a.pixels - b.pixels).mean() > 0.01


def test_pipeline_a_idempotent_on_100_images():
    raws = [synth.render_face(1, s, k) for s in range(25) for k in range(4)]
    diffs = []
    for raw in raws:
        once = apply_preprocessing(raw, Pipeline.A)
        twice = apply_preprocessing(once, Pipeline.A)
        diffs.append(np.abs(once.pixels - twice.pixels).mean())
    assert max(diffs) < 0.02


def test_preprocess_many_skips_detection_failures():
    blank = ImageSample(np.full((64, 64, 3), 0.5), "x", "x0")
    good = synth.render_face(0, 0, 0)
    assert len(preprocess_many([blank, good], Pipeline.A)) == 1


def test_split_same_identities_halves_samples():
    raw = [ImageSample(np.zeros((4, 4, 3)), f"s{s:03d}", f"s{s:03d}-k{k:02d}", "A")
           for s in range(100) for k in range(1, 11)]
    att, train, test = split_disjoint(raw, raw, DataCondition.SAME_IDENTITIES)
    assert len(att) == 500 and len(train) + len(test) == 500
    a_keys = {(s.subject_id, s.sample_id) for s in att}
    t_keys = {(s.subject_id, s.sample_id) for s in train + test}
    assert not a_keys & t_keys
    assert {s.sample_id[-2:] for s in att} == {f"{k:02d}" for k in range(1, 6)}
    assert {s.sample_id[-2:] for s in train + test} == {f"{k:02d}" for k in range(6, 11)}


def test_split_disjoint_subject_conditions():
    a = synthetic_faces(0, range(10, 16), range(2), Pipeline.A)
    t_same = synthetic_faces(0, range(6), range(2), Pipeline.A)
    t_diff = synthetic_faces(0, range(6), range(2), Pipeline.B)
    att, tr, te = split_disjoint(a, t_same, DataCondition.SAME_PREPROCESSING)
    assert not {s.subject_id for s in att} & {s.subject_id for s in tr + te}
    assert resolve_condition(att, tr + te) is DataCondition.SAME_PREPROCESSING
    att, tr, te = split_disjoint(a, t_diff, DataCondition.DIFF_PREPROCESSING)
    assert {s.preprocessing_tag for s in att} == {"A"} and {s.preprocessing_tag for s in tr} == {"B"}
    assert resolve_condition(att, tr + te) is DataCondition.DIFF_PREPROCESSING
    with pytest.raises(SplitError):
        split_disjoint(a, t_diff, DataCondition.SAME_PREPROCESSING)


def test_split_impossible_condition():
    one = [ImageSample(np.zeros((4, 4, 3)), "s0", f"k{k}", "A") for k in range(4)]
    with pytest.raises(SplitError):
        split_disjoint(one, one, DataCondition.SAME_PREPROCESSING)


@settings(max_examples=25)
@given(st.integers(2, 8), st.integers(4, 6), st.integers(1, 8), st.sampled_from(list(DataCondition)))
def test_split_never_overlaps(n_subj, n_samp, n_att, cond):
    tag_t = "B" if cond is DataCondition.DIFF_PREPROCESSING else "A"
    shared = cond is DataCondition.SAME_IDENTITIES
    a = [ImageSample(np.zeros((2, 2, 3)), f"s{s}", f"s{s}k{k}", "A")
         for s in (range(n_subj) if shared else range(100, 100 + n_att)) for k in range(n_samp)]
    t = [ImageSample(np.zeros((2, 2, 3)), f"s{s}", f"s{s}k{k}", tag_t)
         for s in range(n_subj) for k in range(n_samp)]
    att, train, test = split_disjoint(a, t, cond)
    keys = lambda xs: {(x.subject_id, x.sample_id) for x in xs}
    assert not keys(att) & keys(train + test)
    if not shared:
        assert not {x.subject_id for x in att} & {x.subject_id for x in train + test}
