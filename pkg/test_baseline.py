"""
Tests for reference pools and baseline sampling.
"""

import csv
import io
import logging

import numpy as np
import pytest

from baseline import (ReferencePool, build_reference_pool, default_per_slide, make_baseline, pool_provenance_csv,
                      sample_baseline, sample_indices, write_pool_provenance)
from data_io import FeatureBag, grid_coords
from errors import ContractError, EmptyBagError, ParameterError, PoolError


def bag(slide_id, label, n, d=3, value=None):
    if value is None:
        features = np.random.default_rng(sum(map(ord, slide_id))).standard_normal((n, d))
    else:
        features = np.full((n, d), value)
    return FeatureBag(slide_id=slide_id, patient_id=slide_id, label=label, features=features, coords=grid_coords(n))


@pytest.fixture
def negatives():
    return [bag(f"n{i:02d}", 0, 20, value=float(i)) for i in range(10)]


def test_default_per_slide():
    bags = [bag("a", 0, 10), bag("b", 0, 30), bag("c", 0, 100)]
    assert default_per_slide(bags, 30) == 1
    assert default_per_slide(bags, 4) == 8


def test_pool_takes_equal_rows_per_slide(negatives):
    pool = build_reference_pool(negatives, target_class=1, n_slides=4, per_slide=5, seed=3)
    assert pool.size == 20
    assert len(pool.source_slides) == 4
    assert set(pool.rows_per_slide().values()) == {5}
    assert not pool.sparse_warning
    for (slide_id, row), features in zip(pool.provenance, pool.features):
        source = next(b for b in negatives if b.slide_id == slide_id)
        np.testing.assert_array_equal(features, source.features64()[row])


def test_pool_is_deterministic(negatives):
    a = build_reference_pool(negatives, 1, n_slides=3, per_slide=4, seed=8)
    b = build_reference_pool(negatives, 1, n_slides=3, per_slide=4, seed=8)
    assert a.provenance == b.provenance
    np.testing.assert_array_equal(a.features, b.features)


def test_pool_rows_without_replacement_when_possible(negatives):
    pool = build_reference_pool(negatives, 1, n_slides=2, per_slide=20, seed=0)
    for slide_id in pool.source_slides:
        rows = [row for s, row in pool.provenance if s == slide_id]
        assert sorted(rows) == list(range(20))
    assert pool.with_replacement == ()


def test_small_slide_is_sampled_with_replacement(caplog):
    slides = [bag("tiny", 0, 2), bag("big", 0, 50)]
    with caplog.at_level(logging.WARNING):
        pool = build_reference_pool(slides, 1, n_slides=2, per_slide=5, seed=0)
    assert pool.with_replacement == ("tiny",)
    assert pool.rows_per_slide() == {"tiny": 5, "big": 5}
    assert "with replacement" in caplog.text


def test_sparse_pool_warns(negatives, caplog):
    with caplog.at_level(logging.WARNING):
        pool = build_reference_pool(negatives[:3], 1, n_slides=30, seed=0)
    assert pool.sparse_warning
    assert len(pool.source_slides) == 3
    assert pool.per_slide == 1


def test_pool_balances_classes_round_robin():
    slides = [bag(f"a{i}", 0, 10) for i in range(6)] + [bag(f"b{i}", 2, 10) for i in range(6)]
    pool = build_reference_pool(slides, target_class=1, n_slides=4, per_slide=2, seed=1)
    labels = [0 if s.startswith("a") else 2 for s in pool.source_slides]
    assert labels.count(0) == 2 and labels.count(2) == 2
    assert pool.classes == (0, 2)


def test_pool_errors(negatives):
    with pytest.raises(PoolError):
        build_reference_pool([], 1)
    with pytest.raises(ContractError):
        build_reference_pool(negatives + [bag("t", 1, 5)], 1)
    with pytest.raises(PoolError):
        build_reference_pool([bag("x", 0, 5, d=3), bag("y", 0, 5, d=4)], 1)
    with pytest.raises(ParameterError):
        build_reference_pool(negatives, 1, n_slides=0)


def test_sample_baseline_matches_bag_size(negatives):
    pool = build_reference_pool(negatives, 1, n_slides=5, per_slide=4, seed=2)
    baseline = sample_baseline(pool, 7, seed=(11, 0))
    assert baseline.shape == (7, 3)
    pool_rows = {tuple(row) for row in pool.features}
    assert all(tuple(row) in pool_rows for row in baseline)
    np.testing.assert_array_equal(baseline, sample_baseline(pool, 7, seed=(11, 0)))


def test_sample_indices_errors():
    pool = ReferencePool.from_features(np.ones((3, 2)))
    with pytest.raises(EmptyBagError):
        sample_indices(pool, 0, seed=0)
    with pytest.raises(PoolError):
        ReferencePool.from_features(np.zeros((0, 2)))


def test_make_baseline_strategies(negatives):
    target = bag("t", 1, 4)
    pool = build_reference_pool(negatives, 1, n_slides=3, per_slide=2, seed=0)
    assert make_baseline("opposite", target, pool, seed=1).shape == (4, 3)
    np.testing.assert_array_equal(make_baseline("zero", target), np.zeros((4, 3)))
    mean = make_baseline("mean", target, reference_bags=negatives[:2])
    np.testing.assert_allclose(mean, np.full((4, 3), 0.5))
    with pytest.raises(PoolError):
        make_baseline("opposite", target)
    with pytest.raises(ParameterError):
        make_baseline("noise", target, pool)


def test_provenance_export(tmp_path, negatives):
    pool = build_reference_pool(negatives, 1, n_slides=2, per_slide=3, seed=0)
    write_pool_provenance(pool, tmp_path / "pool.csv")
    lines = (tmp_path / "pool.csv").read_text().splitlines()
    assert lines[0] == "slide_id,row_index,pool_position"
    assert len(lines) == 7
    assert pool.describe()["rows"] == 6


def test_sample_baseline_draws_with_replacement():
    pool = ReferencePool.from_features(np.arange(10, dtype=np.float64).reshape(10, 1))
    samples = [sample_baseline(pool, 10, seed=s)[:, 0] for s in range(50)]
    assert any(len(set(sample)) < 10 for sample in samples)


def test_provenance_quotes_slide_ids_with_commas():
    slides = [bag("n,0", 0, 6, value=0.0), bag('n"1', 0, 6, value=1.0)]
    pool = build_reference_pool(slides, 1, n_slides=2, per_slide=2, seed=0)
    rows = list(csv.reader(io.StringIO(pool_provenance_csv(pool))))
    assert rows[0] == ["slide_id", "row_index", "pool_position"]
    assert all(len(row) == 3 for row in rows)
    assert {row[0] for row in rows[1:]} == {"n,0", 'n"1'}
    assert [int(row[2]) for row in rows[1:]] == [0, 1, 2, 3]
