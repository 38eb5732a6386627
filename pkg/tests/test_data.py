"""Data tests: synthetic blobs, IDX/CSV loading, partitioning."""
import struct

import numpy as np
import pytest

from peerfl import (
    Dataset,
    dirichlet_partition,
    iid_partition,
    label_proportions,
    load_csv,
    load_idx,
    synth_blobs,
)
from peerfl.data import holdout_split


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------

def test_synth_shapes_and_label_counts():
    ds = synth_blobs(num_classes=5, dim=7, per_class=30, spread=1.0, seed=0)
    assert ds.features.shape == (150, 7)
    assert ds.labels.shape == (150,)
    assert ds.num_classes == 5
    counts = np.bincount(ds.labels, minlength=5)
    assert np.all(counts == 30)


def test_synth_deterministic_in_seed():
    a = synth_blobs(4, 6, 20, 1.0, seed=9)
    b = synth_blobs(4, 6, 20, 1.0, seed=9)
    c = synth_blobs(4, 6, 20, 1.0, seed=10)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_synth_class_means_distinct_and_recoverable():
    ds = synth_blobs(num_classes=6, dim=4, per_class=500, spread=0.5, seed=3)
    means = np.array([ds.features[ds.labels == c].mean(axis=0) for c in range(6)])
    # empirical means sit near the lattice: pairwise distances >= ~4
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.linalg.norm(means[i] - means[j]) > 2.0


def test_synth_one_dimensional_falls_back_to_line():
    ds = synth_blobs(num_classes=3, dim=1, per_class=200, spread=0.1, seed=1)
    m = [ds.features[ds.labels == c].mean() for c in range(3)]
    assert m[0] < m[1] < m[2]


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_blobs(1, 4, 10)
    with pytest.raises(ValueError):
        synth_blobs(3, 0, 10)
    with pytest.raises(ValueError):
        synth_blobs(3, 4, 0)
    with pytest.raises(ValueError):
        synth_blobs(3, 4, 10, spread=0.0)


# ---------------------------------------------------------------------------
# IDX loading
# ---------------------------------------------------------------------------

def write_idx_pair(tmp_path, n=3, rows=2, cols=2, labels=(0, 1, 2),
                   image_magic=0x803, label_magic=0x801, truncate_images=0,
                   n_labels=None):
    pixels = bytes(range(n * rows * cols))
    img = struct.pack(">iiii", image_magic, n, rows, cols) + pixels
    if truncate_images:
        img = img[:-truncate_images]
    n_labels = n if n_labels is None else n_labels
    lab = struct.pack(">ii", label_magic, n_labels) + bytes(labels[:n_labels])
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    ip.write_bytes(img)
    lp.write_bytes(lab)
    return ip, lp


def test_idx_roundtrip(tmp_path):
    ip, lp = write_idx_pair(tmp_path)
    ds = load_idx(ip, lp)
    assert ds.features.shape == (3, 4)
    assert np.array_equal(ds.labels, [0, 1, 2])
    assert ds.num_classes == 3
    # pixel k of image 0 is k/255
    assert np.allclose(ds.features[0], np.arange(4) / 255.0)
    assert ds.features.max() <= 1.0


def test_idx_bad_magic(tmp_path):
    ip, lp = write_idx_pair(tmp_path, image_magic=0x804)
    with pytest.raises(ValueError, match="magic"):
        load_idx(ip, lp)
    ip, lp = write_idx_pair(tmp_path, label_magic=0x802)
    with pytest.raises(ValueError, match="magic"):
        load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    ip, lp = write_idx_pair(tmp_path, truncate_images=3)
    with pytest.raises(ValueError, match="truncated"):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_idx_pair(tmp_path, n_labels=2)
    with pytest.raises(ValueError, match="mismatch"):
        load_idx(ip, lp)


def test_idx_empty(tmp_path):
    ip, lp = write_idx_pair(tmp_path, n=0, labels=(), n_labels=0)
    with pytest.raises(ValueError, match="empty"):
        load_idx(ip, lp)


def test_idx_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_idx(tmp_path / "nope.idx", tmp_path / "nope2.idx")


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    p = tmp_path / "data.csv"
    p.write_text("f1,f2,label\n0.5,1.5,0\n-1.0,2.0,2\n0.0,0.0,1\n")
    ds = load_csv(p)
    assert ds.features.shape == (3, 2)
    assert np.array_equal(ds.labels, [0, 2, 1])
    assert ds.num_classes == 3
    assert ds.features[1, 0] == -1.0


def test_csv_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(empty)
    header_only = tmp_path / "h.csv"
    header_only.write_text("a,b,label\n")
    with pytest.raises(ValueError, match="no data"):
        load_csv(header_only)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,label\n1.0,oops,0\n")
    with pytest.raises(ValueError, match="malformed"):
        load_csv(bad)
    narrow = tmp_path / "n.csv"
    narrow.write_text("label\n0\n")
    with pytest.raises(ValueError, match="feature column"):
        load_csv(narrow)


# ---------------------------------------------------------------------------
# holdout
# ---------------------------------------------------------------------------

def test_holdout_split_sizes_and_disjointness():
    ds = synth_blobs(4, 3, 50, seed=5)  # 200 samples
    pool, test = holdout_split(ds, 0.2, seed=1)
    assert len(test) == 40 and len(pool) == 160
    again_pool, again_test = holdout_split(ds, 0.2, seed=1)
    assert np.array_equal(pool.features, again_pool.features)
    # union of rows reconstructs the source multiset
    all_rows = np.vstack([pool.features, test.features])
    assert np.array_equal(
        np.sort(all_rows, axis=0), np.sort(ds.features, axis=0)
    )
    with pytest.raises(ValueError):
        holdout_split(ds, 1.5, seed=0)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def partition_covers(part, n):
    joined = np.concatenate(part.client_indices)
    assert joined.size == n
    assert np.array_equal(np.sort(joined), np.arange(n))


def test_iid_partition_near_equal_and_covering():
    ds = synth_blobs(5, 4, 41, seed=2)  # 205 samples over 10 clients
    part = iid_partition(ds, 10, seed=3)
    partition_covers(part, 205)
    sizes = [idx.size for idx in part.client_indices]
    assert max(sizes) - min(sizes) <= 1
    # deterministic
    part2 = iid_partition(ds, 10, seed=3)
    for a, b in zip(part.client_indices, part2.client_indices):
        assert np.array_equal(a, b)


def test_train_val_split_is_80_20_floor():
    ds = synth_blobs(4, 4, 50, seed=4)
    part = iid_partition(ds, 8, seed=5)
    for ci, tr, va in zip(part.client_indices, part.train_indices, part.val_indices):
        assert va.size == int(np.floor(0.2 * ci.size))
        assert tr.size + va.size == ci.size
        assert tr.size >= 1
        merged = np.sort(np.concatenate([tr, va]))
        assert np.array_equal(merged, np.sort(ci))


def test_iid_partition_rejects_too_many_clients():
    ds = synth_blobs(2, 2, 2, seed=0)  # 4 samples
    with pytest.raises(ValueError):
        iid_partition(ds, 5, seed=0)


def test_dirichlet_partition_covers_and_never_empty():
    ds = synth_blobs(6, 4, 40, seed=6)  # 240 samples
    for seed in range(12):
        part = dirichlet_partition(ds, 10, beta=0.05, seed=seed)
        partition_covers(part, 240)
        assert all(idx.size >= 1 for idx in part.client_indices)
        assert all(tr.size >= 1 for tr in part.train_indices)


def test_dirichlet_skew_exceeds_iid_skew():
    # mean per-client label entropy: heavy skew -> much lower than IID
    ds = synth_blobs(6, 4, 100, seed=7)

    def mean_entropy(part):
        ents = []
        for idx in part.client_indices:
            p = label_proportions(ds, idx)
            nz = p[p > 0]
            ents.append(-np.sum(nz * np.log(nz)))
        return np.mean(ents)

    skewed = mean_entropy(dirichlet_partition(ds, 8, beta=0.1, seed=8))
    uniform = mean_entropy(iid_partition(ds, 8, seed=8))
    assert skewed < uniform - 0.5


def test_dirichlet_deterministic_and_validated():
    ds = synth_blobs(3, 3, 30, seed=9)
    a = dirichlet_partition(ds, 5, beta=0.5, seed=1)
    b = dirichlet_partition(ds, 5, beta=0.5, seed=1)
    for x, y in zip(a.client_indices, b.client_indices):
        assert np.array_equal(x, y)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, 5, beta=0.0, seed=1)


# ---------------------------------------------------------------------------
# label proportions
# ---------------------------------------------------------------------------

def test_label_proportions_matches_bincount():
    ds = synth_blobs(4, 3, 25, seed=10)
    idx = np.arange(0, 60)
    p = label_proportions(ds, idx)
    ref = np.bincount(ds.labels[idx], minlength=4) / 60
    assert np.allclose(p, ref, atol=0)
    assert abs(p.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        label_proportions(ds, np.array([], dtype=np.int64))


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 5]), 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 3)
