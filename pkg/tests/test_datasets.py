import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fedfreeze.datasets import (class_frequencies, generate_blobs, load_csv, partition_dirichlet,
                                partition_iid, train_test_split)
from fedfreeze.metrics import one_hot


def test_blobs_deterministic_and_shaped():
    a = generate_blobs(3, 5, 100, seed=4)
    b = generate_blobs(3, 5, 100, seed=4)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.features.shape == (100, 5) and a.features.dtype == np.float32
    assert np.bincount(a.labels).tolist() == [34, 33, 33]
    assert generate_blobs(3, 5, 100, seed=5).features.tobytes() != a.features.tobytes()


def test_single_class():
    assert set(generate_blobs(1, 3, 20).labels.tolist()) == {0}


def test_degenerate_blobs():
    with pytest.raises(ValueError):
        generate_blobs(5, 2, 3)
    with pytest.raises(ValueError):
        generate_blobs(0, 2, 3)


def test_well_separated_blobs_are_linearly_separable():
    # least-squares linear classifier as a closed-form separability check
    ds = generate_blobs(2, 2, 1000, seed=0, class_sep=10.0, std=0.5)
    X = np.hstack([ds.features, np.ones((1000, 1))])
    W, *_ = np.linalg.lstsq(X, one_hot(ds.labels, 2), rcond=None)
    acc = np.mean((X @ W).argmax(1) == ds.labels)
    assert acc > 0.99


def test_iid_equal_sizes_and_cover():
    ds = generate_blobs(4, 3, 100, seed=0)
    parts = partition_iid(ds, 10, seed=1)
    assert [p.sample_count for p in parts] == [10] * 10
    idx = np.concatenate([p.indices for p in parts])
    assert sorted(idx.tolist()) == list(range(100))
    for p in parts:
        np.testing.assert_array_equal(p.features, ds.features[p.indices])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(1, 20), st.integers(0, 1000))
def test_iid_sizes_differ_by_at_most_one(n, k, seed):
    if k > n:
        return
    parts = partition_iid(generate_blobs(1, 2, n), k, seed=seed)
    sizes = [p.sample_count for p in parts]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n


def test_iid_class_frequencies_match_global():
    ds = generate_blobs(5, 2, 20000, seed=0)
    parts = partition_iid(ds, 10, seed=3)
    table = np.array([np.bincount(p.labels, minlength=5) for p in parts])
    _, pval, _, _ = stats.chi2_contingency(table)
    assert pval > 0.001


def test_iid_rejects_bad_counts():
    ds = generate_blobs(2, 2, 5)
    with pytest.raises(ValueError):
        partition_iid(ds, 0)
    with pytest.raises(ValueError):
        partition_iid(ds, 6)


@pytest.mark.parametrize("alpha", [0.1, 1.0, 1000.0])
def test_dirichlet_cover_and_disjoint(alpha):
    ds = generate_blobs(4, 2, 2000, seed=0)
    parts = partition_dirichlet(ds, 10, alpha, seed=2)
    idx = np.concatenate([p.indices for p in parts])
    assert len(idx) == len(set(idx.tolist())) == 2000
    assert all(p.sample_count > 0 for p in parts)


def test_dirichlet_small_alpha_is_skewed():
    ds = generate_blobs(4, 2, 4000, seed=0)
    parts = partition_dirichlet(ds, 10, 0.1, seed=0)
    top = max(class_frequencies(p.labels, 4).max() for p in parts)
    assert top > 0.6


def test_dirichlet_large_alpha_approaches_iid():
    ds = generate_blobs(4, 2, 40000, seed=0)
    glob = class_frequencies(ds.labels, 4)
    parts = partition_dirichlet(ds, 10, 1000.0, seed=0)
    for p in parts:
        assert np.abs(class_frequencies(p.labels, 4) - glob).max() < 0.05


def test_dirichlet_is_deterministic():
    ds = generate_blobs(4, 2, 500, seed=0)
    a = partition_dirichlet(ds, 5, 0.5, seed=9)
    b = partition_dirichlet(ds, 5, 0.5, seed=9)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_dirichlet_errors():
    ds = generate_blobs(2, 2, 10)
    with pytest.raises(ValueError):
        partition_dirichlet(ds, 3, 0.0)
    with pytest.raises(ValueError, match="empty"):
        partition_dirichlet(ds, 10, 0.001, seed=0, max_retries=3)


def test_train_test_split_disjoint():
    ds = generate_blobs(3, 2, 100, seed=0)
    tr, te = train_test_split(ds, 0.2, seed=1)
    assert len(tr) == 80 and len(te) == 20
    with pytest.raises(ValueError):
        train_test_split(ds, 1.0)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1.5,2,0\n-1,0.25,2\n", encoding="utf-8")
    ds = load_csv(p)
    assert ds.features.tolist() == [[1.5, 2.0], [-1.0, 0.25]]
    assert ds.labels.tolist() == [0, 2] and ds.n_classes == 3


@pytest.mark.parametrize("text", ["", "a,label\n", "a,b,label\n1,2\n", "a,label\n1,-1\n",
                                  "a,label\nx,0\n"])
def test_load_csv_errors(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text, encoding="utf-8")
    with pytest.raises(ValueError):
        load_csv(p)
