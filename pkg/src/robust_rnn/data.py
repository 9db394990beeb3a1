"""Sequence datasets: MNIST from IDX files, row sequencing and a synthetic
two-class task.

IDX layout (all header integers big-endian, unsigned 32-bit)::

    images: magic 0x00000803, count, rows, cols, then count*rows*cols ubytes
    labels: magic 0x00000801, count, then count ubytes
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "IdxError",
    "BadMagicError",
    "TruncatedFileError",
    "CountMismatchError",
    "IMAGES_MAGIC",
    "LABELS_MAGIC",
    "SequenceSample",
    "Dataset",
    "parse_idx_images",
    "parse_idx_labels",
    "idx_images_bytes",
    "idx_labels_bytes",
    "load_idx",
    "sequence_rows",
    "stack_rows",
    "synth_two_class",
    "corrupt",
    "subset",
    "write_manifest",
    "read_manifest",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX input."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class SequenceSample:
    inputs: np.ndarray
    label: int | None = None
    target: np.ndarray | None = None


@dataclass(frozen=True)
class Dataset:
    """``inputs`` is ``(N, T, d)``; classification sets carry ``labels`` (N,),
    regression sets carry ``targets`` (N, T, m)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 3 or inputs.shape[0] == 0:
            raise ValueError(f"dataset inputs must be a non-empty (N, T, d) array, got {inputs.shape}")
        object.__setattr__(self, "inputs", inputs)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (inputs.shape[0],):
                raise ValueError("labels must have one entry per sample")
            object.__setattr__(self, "labels", labels)
        if self.targets is not None:
            targets = np.asarray(self.targets, dtype=np.float64)
            if targets.shape[:2] != inputs.shape[:2]:
                raise ValueError("targets must be (N, T, m)")
            object.__setattr__(self, "targets", targets)
        if self.labels is None and self.targets is None:
            raise ValueError("dataset needs labels or targets")

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, i) -> SequenceSample:
        return SequenceSample(
            self.inputs[i],
            None if self.labels is None else int(self.labels[i]),
            None if self.targets is None else self.targets[i],
        )

    @property
    def T(self) -> int:
        return self.inputs.shape[1]

    @property
    def d(self) -> int:
        return self.inputs.shape[2]

    def take(self, indices, split=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        prov = dict(self.provenance)
        prov["parent_size"] = len(self)
        return Dataset(
            self.inputs[indices],
            None if self.labels is None else self.labels[indices],
            None if self.targets is None else self.targets[indices],
            self.split if split is None else split,
            prov,
        )


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(raw: bytes, magic: int, ndims: int, what: str):
    if len(raw) >= 4:
        (found,) = struct.unpack(">I", raw[:4])
        if found != magic:
            raise BadMagicError(f"{what}: magic {found:#010x}, expected {magic:#010x}")
    size = 4 * (1 + ndims)
    if len(raw) < size:
        raise TruncatedFileError(f"{what}: {len(raw)} bytes is shorter than the {size}-byte header")
    return struct.unpack(f">{ndims}I", raw[4:size]), size


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Raw IDX image bytes to a ``(count, rows, cols)`` uint8 array."""
    (count, rows, cols), offset = _header(raw, IMAGES_MAGIC, 3, "images")
    need = count * rows * cols
    if len(raw) - offset < need:
        raise TruncatedFileError(f"images: expected {need} pixel bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset).reshape(count, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (count,), offset = _header(raw, LABELS_MAGIC, 1, "labels")
    if len(raw) - offset < count:
        raise TruncatedFileError(f"labels: expected {count} label bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)


def idx_images_bytes(images) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def sequence_rows(image) -> np.ndarray:
    """One input vector per image row, top row first: ``(28, 28) -> (T=28, d=28)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (28, 28):
        raise ValueError(f"expected a 28x28 image, got {image.shape}")
    return image.copy()


def stack_rows(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape != (28, 28):
        raise ValueError(f"expected 28 rows of 28 pixels, got {rows.shape}")
    return rows.copy()


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an MNIST image/label pair; pixels are scaled to [0, 1]."""
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise IdxError("empty IDX files")
    # row r of each image is input u_r, so the (count, rows, cols) block is
    # already laid out as (N, T, d)
    inputs = images / 255.0
    return Dataset(
        inputs,
        labels.astype(np.int64),
        split=split,
        provenance={"images": str(images_path), "labels": str(labels_path)},
    )


def synth_two_class(n_per_class: int, T: int, d: int, separation: float, rng) -> Dataset:
    """Class ``k`` sequences are i.i.d. ``N(s_k * separation * mu0, I)`` per step,
    with ``s_0 = -1``, ``s_1 = +1`` and a fixed unit direction ``mu0``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    if not separation > 0:
        raise ValueError("separation must be positive")
    mu0 = np.ones(d) / np.sqrt(d)
    labels = np.repeat([0, 1], n_per_class)
    sign = np.where(labels == 1, 1.0, -1.0)
    inputs = rng.standard_normal((2 * n_per_class, T, d)) + sign[:, None, None] * separation * mu0
    return Dataset(inputs, labels, split="synthetic", provenance={"task": "two_class", "separation": separation})


def corrupt(sample: SequenceSample, omega: float, rng) -> SequenceSample:
    """Add independent ``N(0, omega I)`` noise to every input vector (no clipping)."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    if omega == 0:
        return sample
    noisy = sample.inputs + np.sqrt(omega) * rng.standard_normal(sample.inputs.shape)
    return SequenceSample(noisy, sample.label, sample.target)


def subset(dataset: Dataset, size: int, seed: int, split=None):
    """Seeded random subset of ``size`` samples; returns ``(dataset, indices)``."""
    if size > len(dataset):
        raise ValueError(f"requested {size} samples from a set of {len(dataset)}")
    indices = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:size])
    return dataset.take(indices, split), indices


def write_manifest(path, indices, note: str = "") -> None:
    lines = [f"# {note}"] if note else []
    lines += [str(int(i)) for i in indices]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> np.ndarray:
    values = [
        int(line) for line in Path(path).read_text().splitlines() if line.strip() and not line.startswith("#")
    ]
    return np.array(values, dtype=np.int64)
