import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from invlab.core import (AttackScenario, DataCondition, EmbeddingBatch, EmbeddingRecord, FTLevel, ImageSample,
                         minmax_apply, minmax_fit, minmax_transform)
from invlab.errors import InvalidInput, LengthMismatch

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def rec(v, model="m", layer="emb"):
    return EmbeddingRecord(np.asarray(v, dtype=np.float32), model, layer)


def test_minmax_fit_two_vectors():
    p = minmax_fit([rec([0, 2]), rec([1, 4])])
    np.testing.assert_array_equal(p.min, [0, 2])
    np.testing.assert_array_equal(p.max, [1, 4])


def test_minmax_fit_single_vector_is_degenerate():
    p = minmax_fit([rec([3.0, -1.5, 7.0])])
    np.testing.assert_array_equal(p.min, p.max)


def test_minmax_fit_errors():
    with pytest.raises(InvalidInput):
        minmax_fit([])
    with pytest.raises(LengthMismatch):
        minmax_fit([rec([0, 1]), rec([0, 1, 2])])


def test_minmax_fit_matches_brute_force_scan():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(100, 12)) * rng.uniform(0.1, 10, size=12)
    p = minmax_fit([rec(v) for v in vecs])
    lo = [min(float(np.float32(v[j])) for v in vecs) for j in range(12)]
    hi = [max(float(np.float32(v[j])) for v in vecs) for j in range(12)]
    np.testing.assert_array_equal(p.min, lo)
    np.testing.assert_array_equal(p.max, hi)
    out = minmax_apply(EmbeddingBatch(vecs, "m", "emb"), p).vectors
    np.testing.assert_allclose(out.min(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out.max(axis=0), 1, atol=1e-6)


def test_minmax_apply_endpoints_and_constant_dim():
    p = minmax_fit([rec([0, 2]), rec([1, 4])])
    np.testing.assert_array_equal(minmax_apply(rec([0, 2]), p).vector, [0, 0])
    np.testing.assert_array_equal(minmax_apply(rec([1, 4]), p).vector, [1, 1])
    const = minmax_fit([rec([3.0]), rec([3.0])])
    assert minmax_apply(rec([3.0]), const).vector[0] == 0.5


def test_minmax_apply_out_of_range_not_clipped():
    p = minmax_fit([rec([0.0]), rec([1.0])])
    assert minmax_apply(rec([2.0]), p).vector[0] == 2.0
    with pytest.raises(LengthMismatch):
        minmax_apply(rec([1.0, 2.0]), p)


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 8)), elements=finite))
def test_minmax_round_trip_property(mat):
    p = minmax_fit(mat)
    out = minmax_transform(mat, p)
    span = mat.max(axis=0) - mat.min(axis=0)
    live = span > 0
    np.testing.assert_allclose(out[:, live].min(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out[:, live].max(axis=0), 1, atol=1e-6)
    assert np.all(out[:, ~live] == 0.5)


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 6)), elements=finite),
       st.floats(-50, 50), st.floats(-50, 50))
def test_minmax_is_affine_per_dimension(mat, a, b):
    p = minmax_fit(mat)
    x, y = mat[0], mat[1]
    lhs = minmax_transform(0.5 * x + 0.5 * y, p)
    rhs = 0.5 * minmax_transform(x, p) + 0.5 * minmax_transform(y, p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_embedding_record_invariants():
    with pytest.raises(LengthMismatch):
        EmbeddingRecord(np.zeros(3), "m", "l", length=4)
    with pytest.raises(InvalidInput):
        EmbeddingRecord(np.array([0.0, np.nan]), "m", "l")
    r = rec([1, 2, 3])
    assert r.length == 3
    with pytest.raises(ValueError):
        r.vector[0] = 5


def test_image_sample_invariants():
    with pytest.raises(InvalidInput):
        ImageSample(np.full((4, 4, 3), 1.5))
    with pytest.raises(InvalidInput):
        ImageSample(np.zeros((0, 4, 3)))
    assert ImageSample(np.zeros((4, 4))).shape == (4, 4, 1)


def test_ft_level_total_order_and_parse():
    levels = list(FTLevel)
    assert levels == sorted(levels)
    assert FTLevel.NO_ADAPT < FTLevel.FT1 < FTLevel.FT5
    assert FTLevel.parse("NoAdapt") is FTLevel.NO_ADAPT
    assert FTLevel.parse("ft3") is FTLevel.FT3
    with pytest.raises(InvalidInput):
        FTLevel.parse("FT9x")


def test_attack_scenario_pool_invariant():
    pool = ("a", "b")
    AttackScenario(DataCondition.SAME_IDENTITIES, "FT1", pool, "a", True)
    AttackScenario(DataCondition.SAME_IDENTITIES, "FT1", pool, "c", False)
    with pytest.raises(InvalidInput):
        AttackScenario(DataCondition.SAME_IDENTITIES, "FT1", pool, "a", False)
    with pytest.raises(InvalidInput):
        AttackScenario(DataCondition.SAME_IDENTITIES, "FT1", pool, "c", True)
    s = AttackScenario("DiffPreProcessing", 2, pool, "a")
    assert AttackScenario.from_dict(s.to_dict()) == s
