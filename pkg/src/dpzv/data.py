"""Dataset generation, loading, and vertical feature partitioning.

A vertical dataset keeps one feature block per device (disjoint column
ranges of the same samples) and the labels at the server.  Supported
sources: seeded synthetic Gaussian class clusters, IDX image/label pairs,
and headerless numeric CSV with a trailing integer label column.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .numerics import SeededStream

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

CONTIGUOUS_ROWS = "contiguous_rows"
CONTIGUOUS_COLS = "contiguous_cols"


@dataclass
class VerticalDataset:
    device_features: list  # one [D x input_dim_m] matrix per device
    labels: np.ndarray     # [D], held by the server
    num_classes: int

    def __post_init__(self):
        counts = {x.shape[0] for x in self.device_features}
        if len(counts) != 1:
            raise ValueError(f"device feature blocks disagree on row count: {counts}")
        if self.labels.shape[0] != next(iter(counts)):
            raise ValueError("label count does not match feature rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def num_samples(self):
        return self.labels.shape[0]

    @property
    def num_devices(self):
        return len(self.device_features)

    @property
    def input_dims(self):
        return [x.shape[1] for x in self.device_features]


def partition_features(features, num_devices, scheme=CONTIGUOUS_ROWS):
    """Split the feature axis into contiguous per-device blocks.

    Block sizes differ by at most one and concatenating the blocks in device
    order reconstructs the input.  For row-major flattened images a
    contiguous split along the feature axis is exactly a split by image
    rows, so both scheme names map to the same contiguous block layout.
    """
    if scheme not in (CONTIGUOUS_ROWS, CONTIGUOUS_COLS):
        raise ValueError(f"unknown partition scheme {scheme!r}")
    features = np.asarray(features)
    n = features.shape[1]
    if num_devices < 1 or num_devices > n:
        raise ValueError(f"cannot split {n} features across {num_devices} devices")
    base, extra = divmod(n, num_devices)
    blocks = []
    start = 0
    for m in range(num_devices):
        width = base + (1 if m < extra else 0)
        blocks.append(features[:, start:start + width])
        start += width
    return blocks


def make_synthetic(num_samples, total_dim, num_devices, num_classes, margin, seed):
    """Gaussian class-conditional features with pairwise class-mean
    separation equal to ``margin``, split contiguously across devices.

    Class means sit at (margin/sqrt(2)) times orthonormal directions, so
    every pair of means is exactly ``margin`` apart; unit-variance noise is
    added and columns are standardized.  Deterministic per seed.
    """
    if num_samples < num_classes:
        raise ValueError(
            f"need at least one sample per class: D={num_samples}, "
            f"classes={num_classes}"
        )
    if total_dim < num_classes:
        raise ValueError("total_dim must be at least num_classes")
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    stream = SeededStream(seed)
    raw = stream.gaussians(total_dim * num_classes).reshape(total_dim, num_classes)
    q, _ = np.linalg.qr(raw)
    means = (margin / np.sqrt(2.0)) * q[:, :num_classes].T  # [classes x dim]
    labels = np.arange(num_samples, dtype=np.int64) % num_classes
    perm = stream.choice(num_samples, num_samples)
    labels = labels[perm]
    noise = stream.gaussians(num_samples * total_dim).reshape(num_samples, total_dim)
    features = means[labels] + noise
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0] = 1.0
    features = (features - mean) / std
    blocks = [np.ascontiguousarray(b) for b in partition_features(features, num_devices)]
    return VerticalDataset(blocks, labels, num_classes)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair into ([D x rows*cols] in [0,1], [D])."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}")
        raw = _read_exact(fh, count * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}")
        raw = _read_exact(fh, label_count, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if label_count != count:
        raise FormatError(
            f"image/label counts disagree: {count} images, {label_count} labels"
        )
    return images.astype(np.float64) / 255.0, labels


def load_csv(path):
    """Headerless numeric rows, final column an integer label.

    Feature columns are standardized (zero mean, unit variance).
    """
    table = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if table.shape[1] < 2:
        raise FormatError("CSV rows need at least one feature and a label column")
    features = table[:, :-1]
    labels = table[:, -1]
    if not np.allclose(labels, np.round(labels)):
        raise FormatError("final CSV column must hold integer labels")
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0] = 1.0
    return (features - mean) / std, labels.astype(np.int64)


def from_features(features, labels, num_devices, num_classes=None, scheme=CONTIGUOUS_ROWS):
    """Wrap a loaded feature matrix as a VerticalDataset."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    blocks = [np.ascontiguousarray(b) for b in partition_features(features, num_devices, scheme)]
    return VerticalDataset(blocks, labels, num_classes)


def batch_sample(dataset, batch_size, stream):
    """B distinct sample ids, uniform without replacement, with the
    row-aligned per-device feature blocks and labels."""
    if batch_size < 1 or batch_size > dataset.num_samples:
        raise ValueError(
            f"batch size {batch_size} outside [1, {dataset.num_samples}]"
        )
    ids = np.sort(stream.choice(dataset.num_samples, batch_size))
    blocks = [x[ids] for x in dataset.device_features]
    return ids, blocks, dataset.labels[ids]
