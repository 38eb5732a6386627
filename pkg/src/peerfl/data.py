"""Datasets, loaders and client partitioning.

A Dataset is a flat (features, labels) pair in float64/int64. Sources: a
synthetic Gaussian-blob generator (default, fully deterministic in the seed),
IDX image/label files, and CSV (header row, last column is the integer
label). Partitioners split sample indices across clients (IID or Dirichlet
label skew), then carve a per-client 80:20 train/validation split.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "Partition",
    "synth_blobs",
    "load_idx",
    "load_csv",
    "holdout_split",
    "iid_partition",
    "dirichlet_partition",
    "label_proportions",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
LATTICE_SPACING = 4.0
VAL_FRACTION = 0.2


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray    # (n,) int64
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (n, d) array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} != ({self.features.shape[0]},)"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Partition:
    """Per-client sample indices into a parent Dataset, with train/val splits."""

    client_indices: list[np.ndarray]
    train_indices: list[np.ndarray]
    val_indices: list[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

def synth_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian blobs, one per class, centred on a fixed 2-D lattice.

    Class c sits at LATTICE_SPACING * (c mod s, c div s, 0, ...) with
    s = ceil(sqrt(C)), so means are pairwise distinct for any C; remaining
    dims are zero. Samples are mean + spread * N(0, I). Class blocks are
    contiguous in the output (partitioners shuffle anyway).
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if spread <= 0:
        raise ValueError(f"spread must be > 0, got {spread}")
    if dim == 1 and num_classes > 1:
        # fall back to a 1-D lattice: class c at c * spacing
        means = LATTICE_SPACING * np.arange(num_classes, dtype=np.float64)[:, None]
    else:
        side = math.ceil(math.sqrt(num_classes))
        means = np.zeros((num_classes, dim))
        for c in range(num_classes):
            means[c, 0] = LATTICE_SPACING * (c % side)
            means[c, 1] = LATTICE_SPACING * (c // side)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), num_classes, dim, per_class]))
    feats = np.concatenate(
        [means[c] + spread * rng.standard_normal((per_class, dim)) for c in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(features=feats, labels=labels, num_classes=num_classes)


def _read_idx_header(raw: bytes, path: str, expect_magic: int, ndim: int) -> tuple[int, ...]:
    header_len = 4 * (1 + ndim)
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expect_magic:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    return struct.unpack(f">{ndim}i", raw[4:header_len])


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled to [0, 1].

    Distinct failures raise distinct messages: wrong magic number, truncated
    payload, image/label count mismatch, empty set.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_img = images_path.read_bytes()
    raw_lab = labels_path.read_bytes()

    n_img, rows, cols = _read_idx_header(raw_img, str(images_path), IDX_IMAGE_MAGIC, 3)
    body = raw_img[16:]
    if len(body) != n_img * rows * cols:
        raise ValueError(
            f"{images_path}: truncated IDX payload ({len(body)} bytes for {n_img}x{rows}x{cols})"
        )
    (n_lab,) = _read_idx_header(raw_lab, str(labels_path), IDX_LABEL_MAGIC, 1)
    lab_body = raw_lab[8:]
    if len(lab_body) != n_lab:
        raise ValueError(f"{labels_path}: truncated IDX payload ({len(lab_body)} bytes for {n_lab})")
    if n_img != n_lab:
        raise ValueError(f"image/label count mismatch: {n_img} images vs {n_lab} labels")
    if n_img == 0:
        raise ValueError(f"{images_path}: empty IDX set")

    feats = np.frombuffer(body, dtype=np.uint8).reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_body, dtype=np.uint8).astype(np.int64)
    return Dataset(features=feats, labels=labels, num_classes=int(labels.max()) + 1)


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """CSV with a header row; all columns but the last are float features,
    the last is the integer class label."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        if len(header) < 2:
            raise ValueError(f"{path}: need at least one feature column plus a label column")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        feats = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
        labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from None
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(features=feats, labels=labels, num_classes=c)


def holdout_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle and split off a global test set BEFORE any client partitioning."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(math.floor(test_fraction * n))
    if n_test < 1 or n - n_test < 1:
        raise ValueError(f"holdout of {n_test} from {n} leaves an empty side")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n, n_test]))
    perm = rng.permutation(n)
    test_idx, pool_idx = perm[:n_test], perm[n_test:]
    mk = lambda idx: Dataset(dataset.features[idx], dataset.labels[idx], dataset.num_classes)
    return mk(pool_idx), mk(test_idx)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def _finish_partition(
    client_indices: list[np.ndarray], rng: np.random.Generator
) -> Partition:
    """Shuffle each client's indices and carve the 80:20 train/val split.

    val size is floor(0.2 * n_client); a 1-sample client keeps that sample in
    train, so train splits are never empty.
    """
    train, val = [], []
    for idx in client_indices:
        idx = np.asarray(idx, dtype=np.int64)
        perm = rng.permutation(idx.size)
        idx = idx[perm]
        n_val = int(math.floor(VAL_FRACTION * idx.size))
        val.append(idx[idx.size - n_val:])
        train.append(idx[: idx.size - n_val])
    return Partition(client_indices=client_indices, train_indices=train, val_indices=val)


def iid_partition(dataset: Dataset, num_clients: int, seed: int) -> Partition:
    """Uniform random split into near-equal shards (sizes differ by at most 1)."""
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if len(dataset) < num_clients:
        raise ValueError(f"cannot split {len(dataset)} samples across {num_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0, num_clients]))
    perm = rng.permutation(len(dataset)).astype(np.int64)
    shards = [np.sort(s) for s in np.array_split(perm, num_clients)]
    return _finish_partition(shards, rng)


def dirichlet_partition(
    dataset: Dataset, num_clients: int, beta: float, seed: int
) -> Partition:
    """Label-skewed split: per class, client shares are drawn Dirichlet(beta).

    Small beta concentrates each class on few clients. Clients left empty by
    the multinomial draws are repaired by taking one sample from the currently
    largest client, so every client ends up with at least one sample.
    """
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if len(dataset) < num_clients:
        raise ValueError(f"cannot split {len(dataset)} samples across {num_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1, num_clients]))
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx_c = np.flatnonzero(dataset.labels == c).astype(np.int64)
        if idx_c.size == 0:
            continue
        idx_c = idx_c[rng.permutation(idx_c.size)]
        shares = rng.dirichlet(np.full(num_clients, beta))
        counts = rng.multinomial(idx_c.size, shares)
        stop = np.cumsum(counts)
        start = stop - counts
        for n in range(num_clients):
            if counts[n]:
                buckets[n].append(idx_c[start[n]:stop[n]])
    shards = [
        np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in buckets
    ]
    # repair empty clients: move one sample at a time from the largest shard
    while True:
        sizes = np.array([s.size for s in shards])
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            break
        donor = int(np.argmax(sizes))
        shards[int(empty[0])] = shards[donor][-1:]
        shards[donor] = shards[donor][:-1]
    return _finish_partition(shards, rng)


def label_proportions(dataset: Dataset, indices: np.ndarray) -> np.ndarray:
    """Normalized label histogram over the given sample indices, length C."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot compute label proportions of an empty index set")
    counts = np.bincount(dataset.labels[indices], minlength=dataset.num_classes)
    return counts / counts.sum()
