"""Datasets, deterministic shuffling and the persistent-minibatch schedule."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import BLOBS_STREAM, EPOCH_STREAM, FIXED_ORDER_STREAM, SPLIT_STREAM, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable set of float64 examples with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels)
        if x.ndim < 2 or x.shape[0] < 1:
            raise DataError(f"features must have shape (N, ...) with N >= 1, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"expected {x.shape[0]} labels, got shape {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.floor(y)):
                raise DataError("labels must be integers")
        y = y.astype(np.int64)
        c = int(self.num_classes)
        if c < 2:
            raise DataError(f"need at least 2 classes, got {c}")
        if y.min() < 0 or y.max() >= c:
            raise DataError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", c)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.features.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PersistencyPolicy:
    """``persistency`` consecutive updates per minibatch of ``batch_size``.

    ``persistency=1`` is ordinary minibatch SGD.
    """

    persistency: int = 1
    batch_size: int = 32
    reshuffle_each_epoch: bool = True

    def __post_init__(self):
        if int(self.persistency) != self.persistency or self.persistency < 1:
            raise ConfigError(f"persistency K must be an integer >= 1, got {self.persistency}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch size must be an integer >= 1, got {self.batch_size}")

    def batches_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def updates_per_epoch(self, n: int) -> int:
        return self.persistency * self.batches_per_epoch(n)


@dataclass(frozen=True, eq=False)
class ScheduleEntry:
    minibatch_id: int
    indices: np.ndarray
    reuse_index: int

    def __eq__(self, other):
        if not isinstance(other, ScheduleEntry):
            return NotImplemented
        return (
            self.minibatch_id == other.minibatch_id
            and self.reuse_index == other.reuse_index
            and np.array_equal(self.indices, other.indices)
        )


def epoch_permutation(n: int, epoch: int, seed: int, reshuffle: bool = True) -> np.ndarray:
    """Order in which examples are visited during ``epoch``.

    Depends on ``(seed, epoch)`` when reshuffling, on ``seed`` alone otherwise.
    """
    rng = make_rng(seed, EPOCH_STREAM, epoch) if reshuffle else make_rng(seed, FIXED_ORDER_STREAM)
    return rng.permutation(n)


def minibatches(n: int, batch_size: int, epoch: int, seed: int, reshuffle: bool = True) -> list[np.ndarray]:
    """Contiguous slices of the epoch permutation; the last may be short.

    Indices inside a minibatch are sorted, which fixes the order in which
    per-example gradients are summed independently of the shuffle.
    """
    perm = epoch_permutation(n, epoch, seed, reshuffle)
    return [np.sort(perm[i : i + batch_size]) for i in range(0, n, batch_size)]


def make_epoch_schedule(n: int, policy: PersistencyPolicy, epoch: int, seed: int) -> list[ScheduleEntry]:
    """Ordered list of updates for one epoch.

    Every minibatch occupies ``policy.persistency`` consecutive entries with
    reuse indices 1..K, so each example is evaluated exactly K times and the
    epoch holds ``K * ceil(n / batch_size)`` updates. A short final minibatch
    is kept and persisted like the others.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    batches = minibatches(n, policy.batch_size, epoch, seed, policy.reshuffle_each_epoch)
    return [
        ScheduleEntry(b, idx, k)
        for b, idx in enumerate(batches)
        for k in range(1, policy.persistency + 1)
    ]


# -- synthetic data -------------------------------------------------------


def blob_centers(num_classes: int, input_dim: int) -> np.ndarray:
    """Unit-norm class centers, independent of any seed.

    Up to ``2 * input_dim`` classes sit on signed coordinate axes
    (+e0, -e0, +e1, ...), so any two centers are at least sqrt(2) apart.
    Beyond that, centers are fixed pseudo-random unit vectors.
    """
    centers = np.zeros((num_classes, input_dim))
    if num_classes <= 2 * input_dim:
        for c in range(num_classes):
            centers[c, c // 2] = 1.0 if c % 2 == 0 else -1.0
        return centers
    raw = make_rng(0, BLOBS_STREAM).standard_normal((num_classes, input_dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate_blobs(num_classes: int, per_class: int, input_dim: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters of std ``spread`` around :func:`blob_centers`.

    Examples are stored class by class; use :func:`split` to shuffle.
    """
    if num_classes < 2 or per_class < 1 or input_dim < 1:
        raise ConfigError("need num_classes >= 2, per_class >= 1 and input_dim >= 1")
    if not spread > 0:
        raise ConfigError(f"spread must be positive, got {spread}")
    centers = blob_centers(num_classes, input_dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = make_rng(seed, BLOBS_STREAM).standard_normal((labels.size, input_dim))
    return Dataset(centers[labels] + spread * noise, labels, num_classes)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle and cut into ``(train, test)``; ``round(N * fraction)`` go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(n * train_fraction))
    if n_train < 1 or n_train >= n:
        raise DataError(f"splitting {n} examples at {train_fraction} leaves one side empty")
    perm = make_rng(seed, SPLIT_STREAM).permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


# -- file formats ---------------------------------------------------------


def write_csv(dataset: Dataset, path) -> None:
    """Write ``label,f1,...,fd`` rows with 17 significant digits (exact round-trip)."""
    x = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="") as f:
        for label, row in zip(dataset.labels, x):
            f.write(",".join([str(int(label)), *(format(v, ".17g") for v in row)]) + "\n")


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Read a header-free ``label,f1,...,fd`` file.

    ``num_classes`` defaults to ``max(label) + 1`` (at least 2). Errors carry
    the 1-based line number.
    """
    path = Path(path)
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    labels, rows, width = [], [], None
    with handle:
        for lineno, record in enumerate(csv.reader(handle), start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            where = f"{path}:{lineno}"
            if len(record) < 2:
                raise DataError(f"{where}: expected a label and at least one feature")
            try:
                label = int(record[0])
            except ValueError:
                raise DataError(f"{where}: label {record[0]!r} is not an integer") from None
            if label < 0:
                raise DataError(f"{where}: negative label {label}")
            if num_classes is not None and label >= num_classes:
                raise DataError(f"{where}: label {label} >= number of classes {num_classes}")
            try:
                feats = [float(cell) for cell in record[1:]]
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from None
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise DataError(f"{where}: expected {width} features, got {len(feats)}")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DataError(f"{path}: no examples")
    c = num_classes if num_classes is not None else max(max(labels) + 1, 2)
    return Dataset(np.array(rows), np.array(labels), c)


def _open_maybe_gzip(path: Path):
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def read_idx(path) -> np.ndarray:
    """Parse one unsigned-byte IDX file (optionally gzip-compressed)."""
    path = Path(path)
    raw = _open_maybe_gzip(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise DataError(f"{path}: unsupported IDX magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim < 1 or len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = math.prod(dims)
    if len(raw) - header != expected:
        raise DataError(f"{path}: expected {expected} data bytes for dims {dims}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1].

    Images come out with a channel axis, shape ``(N, 1, rows, cols)``.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected magic 0x{IDX_IMAGES_MAGIC:08x} (3-D images)")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected magic 0x{IDX_LABELS_MAGIC:08x} (1-D labels)")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise DataError(f"{images_path}: no examples")
    c = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    if labels.max() >= c:
        raise DataError(f"{labels_path}: label {labels.max()} >= number of classes {c}")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), c)
