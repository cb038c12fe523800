# [file name]: data_pipeline.py
"""
MNIST ingestion and the occlusion benchmark data manipulations.

- IDX parsing (optionally gzip-compressed files)
- seeded labeled subsampling
- square m x m masks, one per image, placed uniformly inside the image
- seeded minibatch streams with checkpointable state
- synthetic Gaussian blobs for desk-scale runs
"""

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ml_training.errors import (BadMagicError, CountMismatchError, DataError,
                                TruncatedPayloadError, ValidationError)
from ml_training.seeding import restore_rng, rng_state

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class MaskSpec:
    m: int
    seed: int = 0
    side: int = IMAGE_SIDE

    def __post_init__(self):
        if not 0 <= self.m <= self.side:
            raise ValidationError(f"mask side must be in [0, {self.side}], got {self.m}")

    @property
    def rate(self):
        return masking_rate(self.m, self.side)


@dataclass(frozen=True)
class Provenance:
    source: str
    n: int
    subsample_seed: Optional[int] = None
    mask: Optional[MaskSpec] = None
    # (n, 2) top-left corners of the masks, present when mask.m > 0
    corners: Optional[np.ndarray] = field(default=None, compare=False)


@dataclass(frozen=True)
class MaskedDataset:
    inputs: np.ndarray
    labels: Optional[np.ndarray]
    provenance: Provenance
    num_classes: int = 10

    def __post_init__(self):
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (self.inputs.shape[0],):
                raise CountMismatchError(
                    f"{labels.shape[0] if labels.ndim else 0} labels for {self.inputs.shape[0]} inputs")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValidationError(f"labels must be class indices in [0, {self.num_classes - 1}]")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def is_image(self):
        return self.inputs.ndim == 4

    def unlabeled(self):
        return UnlabeledPool(self.inputs, self.provenance)

    def take(self, indices, subsample_seed=None):
        indices = np.asarray(indices)
        corners = self.provenance.corners
        provenance = replace(
            self.provenance,
            n=int(indices.shape[0]),
            subsample_seed=subsample_seed if subsample_seed is not None else self.provenance.subsample_seed,
            corners=None if corners is None else corners[indices],
        )
        labels = None if self.labels is None else self.labels[indices]
        return MaskedDataset(self.inputs[indices], labels, provenance, self.num_classes)


@dataclass(frozen=True)
class UnlabeledPool:
    """Inputs only; the distiller never receives labels"""

    inputs: np.ndarray
    provenance: Provenance

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class LabeledBatch:
    inputs: np.ndarray
    labels: Optional[np.ndarray]
    indices: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


# ---------------------------------------------------------------- IDX

def _read_header(data, fmt, magic, what):
    size = struct.calcsize(fmt)
    if len(data) < size:
        raise TruncatedPayloadError(f"{what} file shorter than its {size}-byte header")
    header = struct.unpack(fmt, data[:size])
    if header[0] != magic:
        raise BadMagicError(f"{what} file has magic 0x{header[0]:08x}, expected 0x{magic:08x}")
    return header, data[size:]


def parse_idx_labels(labels_bytes):
    (_, count), payload = _read_header(labels_bytes, ">II", LABEL_MAGIC, "label")
    if len(payload) < count:
        raise TruncatedPayloadError(f"label file declares {count} labels but holds {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count).astype(np.int64)


def parse_idx_images(images_bytes):
    (_, count, rows, cols), payload = _read_header(images_bytes, ">IIII", IMAGE_MAGIC, "image")
    expected = count * rows * cols
    if len(payload) < expected:
        raise TruncatedPayloadError(f"image file declares {expected} pixels but holds {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=expected)
    return (pixels.astype(np.float64) / 255.0).reshape(count, 1, rows, cols)


def parse_idx(images_bytes, labels_bytes):
    """(inputs in [0, 1] shaped (n, 1, rows, cols), labels shaped (n,))"""
    inputs = parse_idx_images(images_bytes)
    labels = parse_idx_labels(labels_bytes)
    if inputs.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{inputs.shape[0]} images but {labels.shape[0]} labels")
    return inputs, labels


def encode_idx_images(inputs):
    images = np.rint(np.clip(inputs, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, _, rows, cols = images.shape
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()


def _read_maybe_gzip(base_path):
    for path in (base_path, base_path + ".gz"):
        if os.path.exists(path):
            opener = gzip.open if path.endswith(".gz") else open
            with opener(path, 'rb') as f:
                return f.read()
    raise DataError(f"MNIST file not found: {base_path}[.gz]")


def load_mnist(data_dir, split):
    """Load the 'train' or 'test' split from the standard IDX files"""
    if split not in MNIST_FILES:
        raise ValidationError(f"unknown MNIST split: {split}")
    images_name, labels_name = MNIST_FILES[split]
    inputs, labels = parse_idx(
        _read_maybe_gzip(os.path.join(data_dir, images_name)),
        _read_maybe_gzip(os.path.join(data_dir, labels_name)),
    )
    try:
        return MaskedDataset(inputs, labels, Provenance(source=f"mnist-{split}", n=inputs.shape[0]))
    except ValidationError as e:
        raise DataError(f"MNIST {split} labels in {data_dir}: {e}") from e


def mnist_available(data_dir):
    if not data_dir:
        return False
    return all(
        os.path.exists(os.path.join(data_dir, name)) or os.path.exists(os.path.join(data_dir, name + ".gz"))
        for pair in MNIST_FILES.values() for name in pair
    )


# ---------------------------------------------------------------- subsampling and masking

def subsample_labeled(dataset, N, seed):
    """Seeded sample of N cases without replacement"""
    if N > len(dataset):
        raise ValidationError(f"cannot subsample {N} cases from a dataset of {len(dataset)}")
    if N < 1:
        raise ValidationError(f"subsample size must be positive, got {N}")
    rng = np.random.default_rng(seed)
    indices = rng.permutation(len(dataset))[:N]
    return dataset.take(indices, subsample_seed=seed)


def masking_rate(m, side=IMAGE_SIDE):
    if not 0 <= m <= side:
        raise ValidationError(f"mask side must be in [0, {side}], got {m}")
    return (m * m) / (side * side)


def apply_mask(image, m, corner):
    """Copy of `image` with the m x m block at corner (row, col) set to 0"""
    image = np.asarray(image)
    height, width = image.shape[-2], image.shape[-1]
    row, col = int(corner[0]), int(corner[1])
    if m < 0 or m > min(height, width):
        raise ValidationError(f"mask side {m} does not fit a {height}x{width} image")
    if not (0 <= row <= height - m and 0 <= col <= width - m):
        raise ValidationError(f"mask corner {(row, col)} out of range for m={m}")
    masked = image.copy()
    masked[..., row:row + m, col:col + m] = 0.0
    return masked


def sample_mask_corner(m, rng, side=IMAGE_SIDE):
    """Uniform top-left corner keeping the mask fully inside the image"""
    if not 0 <= m <= side:
        raise ValidationError(f"mask side must be in [0, {side}], got {m}")
    row, col = rng.integers(0, side - m + 1, size=2)
    return int(row), int(col)


def mask_dataset(dataset, mask_spec):
    """Mask every image once; corners are recorded in the provenance"""
    if not dataset.is_image:
        if mask_spec.m == 0:
            return replace(dataset, provenance=replace(dataset.provenance, mask=mask_spec))
        raise ValidationError("masking needs image inputs shaped (n, channels, rows, cols)")

    n = len(dataset)
    height, width = dataset.inputs.shape[-2:]
    if height != mask_spec.side or width != mask_spec.side:
        raise ValidationError(f"mask spec is for {mask_spec.side}x{mask_spec.side} images, got {height}x{width}")

    m = mask_spec.m
    rng = np.random.default_rng(mask_spec.seed)
    corners = np.array([sample_mask_corner(m, rng, mask_spec.side) for _ in range(n)], dtype=np.int64).reshape(n, 2)

    inputs = dataset.inputs
    if m > 0 and n:
        inputs = np.stack([apply_mask(image, m, corner) for image, corner in zip(inputs, corners)])

    provenance = replace(dataset.provenance, mask=mask_spec, corners=corners)
    return MaskedDataset(inputs, dataset.labels, provenance, dataset.num_classes)


# ---------------------------------------------------------------- minibatches

class MinibatchStream:
    """
    Endless stream of size-M batches.

    Each pass is a fresh seeded shuffle; the short remainder of a pass is
    dropped so every batch holds exactly M cases.
    """

    def __init__(self, inputs, labels, batch_size, rng):
        n = inputs.shape[0]
        if not 1 <= batch_size <= n:
            raise ValidationError(f"batch size must be in [1, {n}], got {batch_size}")
        self.inputs = inputs
        self.labels = labels
        self.batch_size = int(batch_size)
        self.rng = rng
        self.passes = 0
        self._order = None
        self._position = 0

    @classmethod
    def from_dataset(cls, dataset, batch_size, rng):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        return cls(dataset.inputs, getattr(dataset, "labels", None), batch_size, rng)

    @property
    def batches_per_pass(self):
        return self.inputs.shape[0] // self.batch_size

    def next_batch(self):
        if self._order is None or self._position + self.batch_size > self._order.shape[0]:
            self._order = self.rng.permutation(self.inputs.shape[0])
            self._position = 0
            self.passes += 1
        indices = self._order[self._position:self._position + self.batch_size]
        self._position += self.batch_size
        labels = None if self.labels is None else self.labels[indices]
        return LabeledBatch(self.inputs[indices], labels, indices)

    def __iter__(self):
        return self

    def __next__(self):
        return self.next_batch()

    def state_dict(self):
        return {
            "rng": rng_state(self.rng),
            "order": None if self._order is None else self._order.copy(),
            "position": self._position,
            "passes": self.passes,
        }

    def load_state_dict(self, state):
        self.rng = restore_rng(state["rng"])
        self._order = None if state["order"] is None else np.asarray(state["order"]).copy()
        self._position = int(state["position"])
        self.passes = int(state["passes"])


def minibatches(dataset, M, seed):
    """Iterator of labeled batches of exactly M cases, cycling forever"""
    return iter(MinibatchStream.from_dataset(dataset, M, seed))


# ---------------------------------------------------------------- synthetic data

def _blob_directions(classes, dims, rng):
    if dims == 2:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if dims >= classes:
        return np.eye(classes, dims)
    directions = rng.standard_normal((classes, dims))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def synthetic_blobs(classes, dims, n_per_class, separation, seed):
    """Unit-variance Gaussian blobs with means at separation * (unit direction)"""
    if classes < 2:
        raise ValidationError(f"need at least 2 classes, got {classes}")
    if dims < 1 or n_per_class < 1:
        raise ValidationError("dims and n_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = separation * _blob_directions(classes, dims, rng)

    labels = np.repeat(np.arange(classes), n_per_class)
    inputs = means[labels] + rng.standard_normal((labels.shape[0], dims))
    order = rng.permutation(labels.shape[0])
    provenance = Provenance(source=f"blobs-{classes}x{dims}-sep{separation:g}", n=int(labels.shape[0]))
    return MaskedDataset(inputs[order], labels[order].astype(np.int64), provenance, classes)


# ---------------------------------------------------------------- dumps

def write_provenance(provenance, path):
    mask = provenance.mask
    lines = [
        f"source = {provenance.source}",
        f"n = {provenance.n}",
        f"subsample_seed = {provenance.subsample_seed if provenance.subsample_seed is not None else ''}",
        f"m = {mask.m if mask else 0}",
        f"mask_seed = {mask.seed if mask else ''}",
        "corners:",
    ]
    if provenance.corners is not None:
        lines.extend(f"{int(r)} {int(c)}" for r, c in provenance.corners)
    with open(path, 'w') as f:
        f.write("\n".join(lines) + "\n")


def read_provenance(path):
    with open(path, 'r') as f:
        lines = f.read().splitlines()
    header = {}
    corners = []
    in_corners = False
    for line in lines:
        if in_corners:
            if line.strip():
                row, col = line.split()
                corners.append((int(row), int(col)))
        elif line.strip() == "corners:":
            in_corners = True
        elif "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    m = int(header.get("m", 0))
    mask_seed = header.get("mask_seed")
    subsample_seed = header.get("subsample_seed")
    return Provenance(
        source=header.get("source", ""),
        n=int(header.get("n", 0)),
        subsample_seed=int(subsample_seed) if subsample_seed else None,
        mask=MaskSpec(m, int(mask_seed)) if mask_seed else None,
        corners=np.asarray(corners, dtype=np.int64).reshape(-1, 2) if corners else None,
    )


def dump_masked_dataset(dataset, out_dir, prefix):
    """IDX image/label files plus a provenance sidecar; returns the written paths"""
    if not dataset.is_image:
        raise ValidationError("only image datasets can be dumped as IDX")
    os.makedirs(out_dir, exist_ok=True)
    paths = {"images": os.path.join(out_dir, f"{prefix}-images-idx3-ubyte")}
    with open(paths["images"], 'wb') as f:
        f.write(encode_idx_images(dataset.inputs))
    if dataset.labels is not None:
        paths["labels"] = os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte")
        with open(paths["labels"], 'wb') as f:
            f.write(encode_idx_labels(dataset.labels))
    paths["provenance"] = os.path.join(out_dir, f"{prefix}-provenance.txt")
    write_provenance(dataset.provenance, paths["provenance"])
    return paths
