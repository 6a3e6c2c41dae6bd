"""Datasets: a synthetic Gaussian-mixture task plus IDX and CSV loaders.

The synthetic task places class means on a circle and draws isotropic
Gaussian samples around them, so the exact class posterior is available
in closed form and gets stored with every sample.  That posterior is
what diagnostics compare mixed targets against.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class DatasetSplit:
    """One split: float32 features [N, D], int labels [N], optional
    float64 posterior [N, K], and a split identifier."""

    inputs: np.ndarray
    labels: np.ndarray
    posterior: np.ndarray | None
    split_id: str

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


class Dataset(NamedTuple):
    train: DatasetSplit
    test: DatasetSplit
    name: str = "dataset"


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian mixture task: K classes on a circle of the given radius,
    shared isotropic sigma, uniform class priors.

    The circle occupies the first two feature dimensions; any further
    dimensions carry pure noise.  Those distractor dimensions are what
    make the default task overfittable, which is the regime where the
    extra supervision signals earn their keep."""

    classes: int = 5
    input_dim: int = 16
    train_samples: int = 2000
    test_samples: int = 2000
    radius: float = 2.0
    sigma: float = 1.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.input_dim < 1:
            raise ValueError(f"input dim must be positive, got {self.input_dim}")
        if self.train_samples < 1 or self.test_samples < 1:
            raise ValueError("both splits need at least one sample")
        if self.radius <= 0 or self.sigma <= 0:
            raise ValueError("radius and sigma must be positive")


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """Float64 class means, evenly spaced on the circle.

    The circle lives in the first two feature dimensions; remaining
    dimensions are zero.  With a single dimension only the cosine
    component survives, so two classes sit at +r and -r.
    """
    k = spec.classes
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, spec.input_dim), dtype=np.float64)
    means[:, 0] = spec.radius * np.cos(angles)
    if spec.input_dim >= 2:
        means[:, 1] = spec.radius * np.sin(angles)
    return means


def bayes_posterior(x: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Exact float64 class posterior for points under the mixture.

    Uniform priors and a shared isotropic sigma cancel, leaving a
    softmax over negative scaled squared distances to the means.
    """
    x = np.asarray(x, dtype=np.float64)
    means = class_means(spec)
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    logit = -d2 / (2.0 * spec.sigma ** 2)
    logit -= logit.max(axis=1, keepdims=True)
    p = np.exp(logit)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _draw_split(spec: SyntheticSpec, n: int, stream: int, split_id: str) -> DatasetSplit:
    rng = np.random.default_rng([spec.noise_seed, stream])
    labels = rng.integers(0, spec.classes, size=n)
    means = class_means(spec)
    x = means[labels] + spec.sigma * rng.standard_normal((n, spec.input_dim))
    x32 = x.astype(DTYPE)
    # posterior is computed from the stored float32 coordinates, so the
    # saved pair stays exactly self-consistent
    post = bayes_posterior(x32.astype(np.float64), spec)
    return DatasetSplit(inputs=x32, labels=labels.astype(np.int64),
                        posterior=post, split_id=split_id)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Train and test splits from disjoint noise streams of one seed."""
    train = _draw_split(spec, spec.train_samples, 0, "train")
    test = _draw_split(spec, spec.test_samples, 1, "test")
    name = (f"synthetic-k{spec.classes}-d{spec.input_dim}"
            f"-r{spec.radius:g}-s{spec.sigma:g}-seed{spec.noise_seed}")
    return Dataset(train=train, test=test, name=name)


# -- batching ------------------------------------------------------------

def batch_indices(n: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Deterministic shuffled partition of range(n) into contiguous chunks.

    Every index appears exactly once; the final chunk may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(split: DatasetSplit, batch_size: int,
            epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (inputs, labels) minibatches covering the split once."""
    for idx in batch_indices(len(split), batch_size, epoch_seed):
        yield split.inputs[idx], split.labels[idx]


# -- IDX binary format ---------------------------------------------------

_IDX_MAGIC_PREFIX = b"\x00\x00"
_IDX_U8 = 0x08


def load_idx(path: str) -> Tensor:
    """Read a big-endian IDX file of unsigned bytes into a float32 tensor.

    Payload bytes are scaled by 1/255 into [0, 1].  Only the unsigned
    byte element type is supported.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    if raw[:2] != _IDX_MAGIC_PREFIX:
        raise ValueError(f"{path}: bad IDX magic {raw[:2].hex()}, expected 0000")
    dtype_code, rank = raw[2], raw[3]
    if dtype_code != _IDX_U8:
        raise ValueError(f"{path}: unsupported IDX element type 0x{dtype_code:02x}, "
                         f"only unsigned byte (0x08) is supported")
    if rank < 1:
        raise ValueError(f"{path}: IDX rank must be at least 1, got {rank}")
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_end:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, "
                         f"dimensions {dims} require {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return Tensor(arr.astype(DTYPE) / DTYPE(255.0))


def load_idx_labels(path: str) -> np.ndarray:
    """Read a rank-1 IDX label file as raw integer classes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:2] != _IDX_MAGIC_PREFIX or raw[2] != _IDX_U8 or raw[3] != 1:
        raise ValueError(f"{path}: expected a rank-1 unsigned-byte IDX label file")
    (n,) = struct.unpack(">I", raw[4:8])
    payload = raw[8:]
    if len(payload) != n:
        raise ValueError(f"{path}: payload holds {len(payload)} labels, header says {n}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx_split(images_path: str, labels_path: str, split_id: str) -> DatasetSplit:
    """Pair an IDX image file with its label file into one flat split."""
    images = load_idx(images_path)
    labels = load_idx_labels(labels_path)
    n = images.shape[0]
    if labels.shape[0] != n:
        raise ValueError(f"image count {n} does not match label count {labels.shape[0]}")
    flat = images.data.reshape(n, -1)
    return DatasetSplit(inputs=np.ascontiguousarray(flat), labels=labels,
                        posterior=None, split_id=split_id)


# -- delimited text ------------------------------------------------------

def load_csv(path: str, label_column: str, split_id: str = "train") -> DatasetSplit:
    """Read a headered CSV of numeric features plus one integer label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        if len(header) < 2:
            raise ValueError(f"{path}: header lists only the label column, no features")

        features: list[list[float]] = []
        labels: list[int] = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_no} has {len(row)} cells, "
                                 f"expected {len(header)}")
            feat = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(f"{path}: row {row_no}, column {col!r}: "
                                     f"could not parse {cell!r} as a number") from None
                if col == label_column:
                    label = int(value)
                    if label != value:
                        raise ValueError(f"{path}: row {row_no}: label {cell!r} "
                                         f"is not an integer")
                    labels.append(label)
                else:
                    feat.append(value)
            features.append(feat)

    if not features:
        raise ValueError(f"{path}: no data rows after the header")
    x = np.asarray(features, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise ValueError(f"{path}: labels must be non-negative, found {int(y.min())}")
    return DatasetSplit(inputs=x, labels=y, posterior=None, split_id=split_id)
