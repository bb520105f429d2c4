"""Datasets, IDX loading, non-iid partitioning and edge-weight statistics."""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, EmptyPartitionError, IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ContractViolation(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.n_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def generate_synthetic(n_samples, d, n_classes, class_separation, rng, noise=1.0):
    """Gaussian class clusters, min-max scaled into [0, 1].

    Class ``c`` is centred at ``class_separation * u_c`` for a random unit
    vector ``u_c``; samples add isotropic noise of std ``noise``. Labels are
    balanced to within one sample and then shuffled.
    """
    if n_samples < n_classes:
        raise ContractViolation(f"n_samples={n_samples} < n_classes={n_classes}")
    if d < 2:
        raise ContractViolation(f"d must be >= 2, got {d}")
    directions = rng.normal(size=(n_classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    x = means[labels] + noise * rng.normal(size=(n_samples, d))
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return Dataset((x - lo) / span, labels, n_classes)


def train_test_split(dataset, n_test, rng):
    if not 0 < n_test < len(dataset):
        raise ContractViolation(f"n_test={n_test} out of range for {len(dataset)} samples")
    perm = rng.permutation(len(dataset))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def _read_idx_header(f, path, expected_magic, ndim):
    head = f.read(4 + 4 * ndim)
    if len(head) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header ({len(head)} bytes)")
    magic, *dims = struct.unpack(">" + "I" * (1 + ndim), head)
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic number, expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    return dims


def load_idx(images_path, labels_path, n_classes=10):
    """Load an IDX image/label pair (MNIST format) with pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        n_img, rows, cols = _read_idx_header(f, images_path, IDX_IMAGES_MAGIC, 3)
        pixels = f.read()
    with open(labels_path, "rb") as f:
        (n_lab,) = _read_idx_header(f, labels_path, IDX_LABELS_MAGIC, 1)
        raw_labels = f.read()
    if len(pixels) < n_img * rows * cols:
        raise IdxFormatError(
            f"{images_path}: truncated, header promises {n_img * rows * cols} pixel bytes, "
            f"found {len(pixels)}")
    if len(raw_labels) < n_lab:
        raise IdxFormatError(
            f"{labels_path}: truncated, header promises {n_lab} labels, found {len(raw_labels)}")
    if n_img != n_lab:
        raise IdxFormatError(f"image count {n_img} does not match label count {n_lab}")
    images = np.frombuffer(pixels, dtype=np.uint8, count=n_img * rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n_lab).astype(np.int64)
    if n_lab and labels.max() >= n_classes:
        raise IdxFormatError(f"{labels_path}: label {labels.max()} >= n_classes={n_classes}")
    return Dataset(images.reshape(n_img, rows * cols) / 255.0, labels, n_classes)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


@dataclass
class Partition:
    """Disjoint per-device index lists into a dataset."""

    device_indices: list
    n_classes: int
    class_histograms: np.ndarray
    scheme: str = "custom"
    params: dict = None

    @classmethod
    def from_indices(cls, device_indices, labels, n_classes, scheme="custom", params=None):
        device_indices = [np.asarray(ix, dtype=np.int64) for ix in device_indices]
        for k, ix in enumerate(device_indices):
            if len(ix) == 0:
                raise EmptyPartitionError(f"device {k} received no samples")
        hist = np.stack([np.bincount(labels[ix], minlength=n_classes) for ix in device_indices])
        return cls(device_indices, n_classes, hist, scheme, dict(params or {}))

    @property
    def n_devices(self):
        return len(self.device_indices)

    @property
    def device_sizes(self):
        return np.array([len(ix) for ix in self.device_indices], dtype=np.int64)

    def classes_per_device(self):
        return (self.class_histograms > 0).sum(axis=1)

    def to_json(self, seed=None):
        return {
            "seed": seed,
            "scheme": self.scheme,
            "params": self.params,
            "device_sizes": self.device_sizes.tolist(),
            "class_histograms": self.class_histograms.tolist(),
        }

    def save(self, path, seed=None):
        with open(path, "w") as f:
            json.dump(self.to_json(seed), f, indent=2)


def _check_devices(n, K):
    if K < 1:
        raise ContractViolation(f"K must be >= 1, got {K}")
    if K > n:
        raise ContractViolation(f"cannot split {n} samples over K={K} devices")


def partition_iid(dataset, K, rng):
    """Shuffle and deal out samples so device sizes differ by at most one."""
    _check_devices(len(dataset), K)
    perm = rng.permutation(len(dataset))
    parts = [np.sort(p) for p in np.array_split(perm, K)]
    return Partition.from_indices(parts, dataset.labels, dataset.n_classes, "iid")


def partition_pathological(dataset, K, xi, rng):
    """Label-sorted shards; every device draws ``xi`` of the ``K*xi`` shards.

    Ties in the label sort keep original index order. Shards have size
    ``n // (K*xi)``; the remainder goes to the last shard.
    """
    if xi < 1:
        raise ContractViolation(f"xi must be >= 1, got {xi}")
    n = len(dataset)
    n_shards = K * xi
    _check_devices(n, K)
    if n_shards > n:
        raise ContractViolation(f"K*xi = {n_shards} shards exceed {n} samples")
    order = np.argsort(dataset.labels, kind="stable")
    size = n // n_shards
    bounds = [i * size for i in range(n_shards)] + [n]
    shards = [order[bounds[i]:bounds[i + 1]] for i in range(n_shards)]
    pick = rng.permutation(n_shards)
    parts = [np.sort(np.concatenate([shards[s] for s in pick[k * xi:(k + 1) * xi]]))
             for k in range(K)]
    return Partition.from_indices(parts, dataset.labels, dataset.n_classes,
                                  "pathological", {"xi": int(xi)})


def largest_remainder(total, proportions):
    """Integer counts summing to ``total``, closest to ``total * proportions``."""
    raw = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort: equal remainders go to the lower device index
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def partition_dirichlet(dataset, K, alpha, rng, max_attempts=100):
    """Per-class split with proportions drawn from ``Dir_K(alpha)``.

    If any device ends up empty, all class proportions are redrawn.
    """
    if not alpha > 0:
        raise ContractViolation(f"alpha must be > 0, got {alpha}")
    _check_devices(len(dataset), K)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.n_classes)]
    for _ in range(max_attempts):
        parts = [[] for _ in range(K)]
        for idx in by_class:
            if len(idx) == 0:
                continue
            counts = largest_remainder(len(idx), rng.dirichlet(np.full(K, float(alpha))))
            shuffled = rng.permutation(idx)
            for k, chunk in enumerate(np.split(shuffled, np.cumsum(counts)[:-1])):
                parts[k].append(chunk)
        parts = [np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts]
        if all(len(p) for p in parts):
            return Partition.from_indices(parts, dataset.labels, dataset.n_classes,
                                          "dirichlet", {"alpha": float(alpha)})
    raise EmptyPartitionError(
        f"Dirichlet partition left a device empty after {max_attempts} redraws "
        f"(K={K}, alpha={alpha}, n={len(dataset)})")


@dataclass
class EdgeGrouping:
    """Static device-to-edge map; ``device_edge[k]`` is the edge of device ``k``."""

    device_edge: np.ndarray
    n_edges: int

    def __post_init__(self):
        self.device_edge = np.asarray(self.device_edge, dtype=np.int64)
        if self.device_edge.size and (self.device_edge.min() < 0
                                      or self.device_edge.max() >= self.n_edges):
            raise ContractViolation("device mapped to a non-existent edge")
        empty = set(range(self.n_edges)) - set(self.device_edge.tolist())
        if empty:
            raise ContractViolation(f"edges without devices: {sorted(empty)}")

    @property
    def n_devices(self):
        return len(self.device_edge)

    def devices_of(self, m):
        return np.flatnonzero(self.device_edge == m)

    def edge_sizes(self, partition):
        """Total samples ``|D_m|`` held by each edge's devices."""
        if partition.n_devices != self.n_devices:
            raise ContractViolation(
                f"grouping covers {self.n_devices} devices, partition has {partition.n_devices}")
        return np.bincount(self.device_edge, weights=partition.device_sizes,
                           minlength=self.n_edges).astype(np.int64)


def edge_statistic(grouping, partition):
    """``sum_m (|D_m| / |D|)**2``, the concentration of edge weights."""
    sizes = grouping.edge_sizes(partition)
    return float(np.sum((sizes / sizes.sum()) ** 2))
