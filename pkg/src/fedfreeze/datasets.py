"""Synthetic data, CSV ingestion and client partitioning."""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class Partition:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    @property
    def sample_count(self) -> int:
        return int(len(self.labels))


def generate_blobs(classes: int, dims: int, samples: int, seed: int = 0,
                   class_sep: float = 1.0, std: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters with means drawn from N(0, class_sep^2 I).

    Class sizes differ by at most one and samples are shuffled.
    """
    if classes < 1 or dims < 1 or samples < 1:
        raise ValueError("classes, dims and samples must be positive")
    if classes > samples:
        raise ValueError(f"cannot place {classes} classes in {samples} samples")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(classes, dims))
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    x = means[labels] + rng.normal(0.0, std, size=(samples, dims))
    return Dataset(x.astype(np.float32), labels.astype(np.int64), classes)


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read a UTF-8 CSV with a header, float features and a final integer label column."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise ValueError(f"{path}: expected a header with feature and label columns")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(header)
    for lineno, r in enumerate(rows, start=2):
        if len(r) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(r)}")
    data = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float32)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if labels.min() < 0:
        raise ValueError(f"{path}: negative label")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    if labels.max() >= k:
        raise ValueError(f"{path}: label {labels.max()} outside {k} classes")
    return Dataset(data, labels, k)


def train_test_split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must be in [0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.take(np.sort(perm[n_test:])), ds.take(np.sort(perm[:n_test]))


def _make_partitions(ds: Dataset, groups) -> list[Partition]:
    return [Partition(k, ds.features[idx], ds.labels[idx], idx)
            for k, idx in enumerate(np.sort(g) for g in groups)]


def partition_iid(ds: Dataset, n_clients: int, seed: int = 0) -> list[Partition]:
    """Shuffle and deal the samples into ``n_clients`` near-equal shares."""
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if n_clients > len(ds):
        raise ValueError(f"{n_clients} clients for {len(ds)} samples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return _make_partitions(ds, np.array_split(perm, n_clients))


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed: int = 0,
                        max_retries: int = 100) -> list[Partition]:
    """Label-skewed split: each class is divided across clients by Dirichlet(alpha) shares.

    Draws are repeated until every client has at least one sample.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if n_clients > len(ds):
        raise ValueError(f"{n_clients} clients for {len(ds)} samples")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    for _ in range(max_retries):
        groups = [[] for _ in range(n_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            shares = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(shares)[:-1] * idx.size).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                groups[k].append(part)
        groups = [np.concatenate(g) if g else np.zeros(0, dtype=np.int64) for g in groups]
        if all(g.size > 0 for g in groups):
            return _make_partitions(ds, groups)
    raise ValueError(f"could not draw a Dirichlet({alpha}) split without empty clients "
                     f"after {max_retries} attempts")


def class_frequencies(labels, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels), minlength=n_classes).astype(np.float64)
    return counts / max(counts.sum(), 1.0)
