import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from invlab.core import ImageSample
from invlab.errors import EvalError, ShapeError
from invlab.evalkit import (SAME_IMAGE, SAME_SUBJECT, EvaluationReport, dssim, dssim_batch, emit_report,
                            empirical_cdf, ensemble_attack, identification_accuracy, perceptual_distance,
                            tar_at_far, verify_reconstructions)
from invlab.zoo import IdentificationHead

from conftest import rand_image


def test_dssim_identity_and_constant_extremes():
    img = rand_image(np.random.default_rng(0))
    assert dssim(img, img) == 0.0
    c1 = 0.01 ** 2
    # constant images: zero variance, means 0 and 1 -> SSIM = c1 / (1 + c1)
    expected = (1 - c1 / (1 + c1)) / 2
    assert dssim(np.zeros((64, 64, 3)), np.ones((64, 64, 3))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.49995, abs=1e-6)


def test_dssim_sliding_window_oracle():
    """Direct double loop over every 8x8 window as an independent oracle."""
    rng = np.random.default_rng(1)
    a, b = rng.random((12, 10, 2)), rng.random((12, 10, 2))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(2):
        for i in range(12 - 7):
            for j in range(10 - 7):
                x, y = a[i:i + 8, j:j + 8, ch], b[i:i + 8, j:j + 8, ch]
                mx, my = x.mean(), y.mean()
                vx, vy = x.var(), y.var()
                cov = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    assert dssim(a, b) == pytest.approx((1 - np.mean(vals)) / 2, abs=1e-10)


@settings(max_examples=40)
@given(st.integers(0, 2 ** 31))
def test_dssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3)) ** rng.uniform(0.2, 3)
    d = dssim(x, y)
    assert 0.0 <= d <= 1.0
    assert abs(d - dssim(y, x)) <= 1e-9
    assert d > 0


def test_dssim_batch_and_shape_error():
    rng = np.random.default_rng(2)
    x, y = rng.random((3, 16, 16, 3)), rng.random((3, 16, 16, 3))
    np.testing.assert_allclose(dssim_batch(x, y), [dssim(a, b) for a, b in zip(x, y)])
    with pytest.raises(ShapeError):
        dssim(x[0], x[0, :8])


def test_perceptual_distance_metric_properties(tiny_phi):
    rng = np.random.default_rng(3)
    a, b, c = (rng.random((64, 64, 3)) for _ in range(3))
    dab = perceptual_distance(a, b, tiny_phi, "emb")
    assert perceptual_distance(a, a, tiny_phi, "emb") == 0
    assert dab == pytest.approx(perceptual_distance(b, a, tiny_phi, "emb"))
    assert dab <= perceptual_distance(a, c, tiny_phi, "emb") + perceptual_distance(c, b, tiny_phi, "emb") + 1e-6
    with pytest.raises(ShapeError):
        perceptual_distance(a, a[:32], tiny_phi, "emb")


def test_tar_at_far_examples():
    r = tar_at_far([5, 6, 7], list(range(100)), 0.01)
    # one impostor (99) may be accepted; threshold sits just above 98
    assert r.far == pytest.approx(0.01) and r.tar == 0.0
    r = tar_at_far([98.5, 99.5, 1], list(range(100)), 0.02)
    assert r.tar == pytest.approx(2 / 3) and r.far == pytest.approx(0.02)
    assert tar_at_far([1, 2], [0, 0], 1.0).tar == 1.0
    assert tar_at_far([0.5], [0.5, 0.5], 0.0).tar == 0.0
    with pytest.raises(EvalError):
        tar_at_far([], [1], 0.01)
    with pytest.raises(EvalError):
        tar_at_far([1], [1], 1.5)


def test_tar_at_far_normal_oracle():
    rng = np.random.default_rng(0)
    genuine, impostor = rng.normal(1, 1, 20_000), rng.normal(0, 1, 20_000)
    analytic = norm.sf(norm.isf(0.01) - 1.0)
    r = tar_at_far(genuine, impostor, 0.01)
    assert abs(r.tar - analytic) < 0.02
    assert r.far <= 0.01


@settings(max_examples=40)
@given(st.integers(0, 2 ** 31), st.floats(0, 1), st.floats(0, 1))
def test_tar_at_far_monotone_and_within_target(seed, f1, f2):
    rng = np.random.default_rng(seed)
    g, im = rng.normal(1, 1, 50), rng.normal(0, 1, 80)
    lo, hi = sorted((f1, f2))
    a, b = tar_at_far(g, im, lo), tar_at_far(g, im, hi)
    assert a.tar <= b.tar
    assert a.far <= lo + 1e-12 and b.far <= hi + 1e-12


def _gallery(phi, faces):
    head = IdentificationHead().fit(phi.embed(faces, "emb"), [f.subject_id for f in faces])
    return head


def test_identification_accuracy_and_errors(tiny_phi, small_faces):
    head = _gallery(tiny_phi, small_faces)
    acc = identification_accuracy(small_faces, tiny_phi, "emb", head)
    assert 0 <= acc <= 1
    stranger = ImageSample(small_faces[0].pixels, "zz", "zz0")
    with pytest.raises(EvalError):
        identification_accuracy([stranger], tiny_phi, "emb", head)


def test_noise_identification_near_chance(tiny_phi, small_faces):
    head = _gallery(tiny_phi, small_faces)
    rng = np.random.default_rng(0)
    noise = [ImageSample(rng.random((64, 64, 3)), f.subject_id, f.sample_id) for f in small_faces for _ in range(5)]
    acc = identification_accuracy(noise, tiny_phi, "emb", head)
    assert acc <= 1 / 6 + 0.1


def test_verification_upper_reference(tiny_phi, small_faces):
    """Reconstructions identical to their sources are accepted in SameImage mode."""
    recons = [ImageSample(f.pixels, f.subject_id, f.sample_id, "reconstruction") for f in small_faces[::6]]
    r = verify_reconstructions(recons, small_faces, SAME_IMAGE, tiny_phi, "emb", far=0.05)
    assert r.tar == 1.0 and r.genuine_pairs == 6
    s = verify_reconstructions(recons, small_faces, SAME_SUBJECT, tiny_phi, "emb", far=0.05)
    assert s.tar <= r.tar
    with pytest.raises(EvalError):
        verify_reconstructions(recons, small_faces, "Other", tiny_phi, "emb")
    orphan = [ImageSample(small_faces[0].pixels, "nobody", "nobody-0")]
    with pytest.raises(EvalError):
        verify_reconstructions(orphan, small_faces, SAME_IMAGE, tiny_phi, "emb")


def test_ensemble_n1_matches_single_paths(tiny_phi, small_faces):
    head = _gallery(tiny_phi, small_faces)
    by_subj = {}
    for f in small_faces:
        by_subj.setdefault(f.subject_id, []).append(ImageSample(f.pixels, f.subject_id, f.sample_id))
    one = ensemble_attack(by_subj, 1, tiny_phi, "emb", head, small_faces, far=0.05)
    firsts = [v[0] for v in by_subj.values()]
    assert one.identification == identification_accuracy(firsts, tiny_phi, "emb", head)
    single = verify_reconstructions(firsts, small_faces, SAME_SUBJECT, tiny_phi, "emb", far=0.05)
    assert one.tar == single.tar and one.threshold == single.threshold
    three = ensemble_attack(by_subj, 3, tiny_phi, "emb", head, small_faces, far=0.05)
    assert three.subjects == 6 and three.n == 3
    with pytest.raises(EvalError):
        ensemble_attack(by_subj, 0, tiny_phi, "emb", head, small_faces)
    with pytest.raises(EvalError):
        ensemble_attack(by_subj, 99, tiny_phi, "emb", head, small_faces)


def test_report_and_cdf(tmp_path):
    with pytest.raises(EvalError):
        EvaluationReport([], [], 0.5, 3)
    with pytest.raises(EvalError):
        EvaluationReport([1.5], [], 0.5, 3)
    with pytest.raises(EvalError):
        empirical_cdf([])
    rep = EvaluationReport([0.3, 0.1, 0.2], [2.0, 1.0, 3.0], 0.5, 4)
    assert rep.chance == 0.25 and rep.median_dssim == 0.2
    c = empirical_cdf(rep.dssim)
    assert c[-1, 1] == 1.0 and (np.diff(c[:, 0]) >= 0).all()
    p1 = emit_report(rep, tmp_path / "a")
    p2 = emit_report(rep, tmp_path / "b")
    assert {p.name for p in p1} >= {"report.json", "dssim_cdf.csv", "perc_cdf.csv", "cdf.png", "medians.png"}
    for name in ("report.json", "dssim_cdf.csv", "perc_cdf.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    data = json.loads((tmp_path / "a" / "report.json").read_text())
    assert data["samples"] == 3 and data["chance"] == 0.25
