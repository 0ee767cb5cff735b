"""MNIST ingestion (IDX format), binarization to spins, label encoding, batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
N_PIXELS = 784
DEFAULT_THRESHOLD = 127
DEFAULT_REPLICAS = 5


class DatasetError(ValueError):
    pass


@dataclass
class RawExamples:
    images: np.ndarray  # (n, rows, cols) uint8
    digits: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.digits)


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise DatasetError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def _read_idx(stream: BinaryIO, magic: int, ndim: int, what: str) -> np.ndarray:
    head = _read_exact(stream, 4, f"{what} header")
    (got,) = struct.unpack(">I", head)
    if got != magic:
        raise DatasetError(f"bad {what} magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", _read_exact(stream, 4 * ndim, f"{what} dimensions"))
    payload = _read_exact(stream, int(np.prod(dims)), f"{what} payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images: BinaryIO | str, labels: BinaryIO | str) -> RawExamples:
    """Read an IDX image file (magic 0x803) and label file (magic 0x801)."""
    if isinstance(images, str):
        with open(images, "rb") as fi, open(labels, "rb") as fl:
            return load_idx(fi, fl)
    imgs = _read_idx(images, IMAGES_MAGIC, 3, "images")
    digits = _read_idx(labels, LABELS_MAGIC, 1, "labels").astype(np.int64)
    if len(imgs) != len(digits):
        raise DatasetError(f"count mismatch: {len(imgs)} images, {len(digits)} labels")
    if len(digits) and digits.max() > 9:
        raise DatasetError(f"label value {digits.max()} out of range 0-9")
    return RawExamples(imgs, digits)


def write_idx(images: np.ndarray, digits: np.ndarray, images_out: BinaryIO, labels_out: BinaryIO) -> None:
    images = np.asarray(images, dtype=np.uint8)
    digits = np.asarray(digits, dtype=np.uint8)
    images_out.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
    images_out.write(images.tobytes())
    labels_out.write(struct.pack(">2I", LABELS_MAGIC, len(digits)))
    labels_out.write(digits.tobytes())


@dataclass
class EncodedExample:
    pixel_spins: np.ndarray
    label_spins: np.ndarray
    digit: int


@dataclass
class EncodedDataset:
    """Row ``k`` holds the spin encoding of example ``k``."""

    pixel_spins: np.ndarray  # (n, 784) int8
    label_spins: np.ndarray  # (n, 10 * replicas) int8
    digits: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.digits)

    def __getitem__(self, idx) -> "EncodedDataset | EncodedExample":
        if isinstance(idx, (int, np.integer)):
            return EncodedExample(self.pixel_spins[idx], self.label_spins[idx], int(self.digits[idx]))
        return EncodedDataset(self.pixel_spins[idx], self.label_spins[idx], self.digits[idx])

    @property
    def replicas(self) -> int:
        return self.label_spins.shape[1] // 10

    @property
    def visible(self) -> np.ndarray:
        """Pixels followed by label spins, shape ``(n, 784 + 10 R)``."""
        return np.concatenate([self.pixel_spins, self.label_spins], axis=1)


def encode_labels(digits, replicas: int = DEFAULT_REPLICAS) -> np.ndarray:
    """+1 at positions ``d + 10 r`` for every replica ``r``, -1 elsewhere."""
    d = np.atleast_1d(np.asarray(digits, dtype=np.int64))
    out = -np.ones((len(d), 10 * replicas), dtype=np.int8)
    for r in range(replicas):
        out[np.arange(len(d)), d + 10 * r] = 1
    return out


def decode_labels(label_spins: np.ndarray) -> np.ndarray:
    s = np.atleast_2d(label_spins)
    votes = (s.reshape(len(s), -1, 10) > 0).sum(axis=1)
    return np.argmax(votes, axis=1)


def binarize_images(images: np.ndarray, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """+1 where intensity exceeds ``threshold``, else -1; flattened per image."""
    if not 0 <= threshold <= 255:
        raise DatasetError(f"threshold {threshold} outside [0, 255]")
    imgs = np.asarray(images)
    flat = imgs.reshape(len(imgs), -1)
    return np.where(flat > threshold, 1, -1).astype(np.int8)


def binarize(raw: RawExamples, threshold: int = DEFAULT_THRESHOLD,
             replicas: int = DEFAULT_REPLICAS) -> EncodedDataset:
    return EncodedDataset(binarize_images(raw.images, threshold), encode_labels(raw.digits, replicas),
                          np.asarray(raw.digits, dtype=np.int64))


def make_batches(n_examples: int, batch_size: int, n_batches: int | None = None, seed: int = 0,
                 epoch: int = 0) -> np.ndarray:
    """Shuffled, non-overlapping ``(n_batches, batch_size)`` index schedule for one epoch."""
    if batch_size < 1:
        raise DatasetError("batch size must be >= 1")
    if n_batches is None:
        n_batches = n_examples // batch_size
    if n_batches < 1 or batch_size * n_batches > n_examples:
        raise DatasetError(
            f"{n_batches} batches of {batch_size} need more than {n_examples} examples"
        )
    perm = np.random.default_rng([seed, epoch]).permutation(n_examples)
    return perm[: batch_size * n_batches].reshape(n_batches, batch_size)


def subsample(n_examples: int, count: int, seed: int = 0, digits: np.ndarray | None = None) -> np.ndarray:
    """Indices of a uniform draw without replacement, sorted.

    With ``digits`` given, draws ``count // 10`` of each digit (class-balanced).
    """
    if count > n_examples:
        raise DatasetError(f"cannot draw {count} of {n_examples} examples")
    rng = np.random.default_rng(seed)
    if digits is None:
        return np.sort(rng.choice(n_examples, size=count, replace=False))
    digits = np.asarray(digits)
    if count % 10:
        raise DatasetError("balanced subsample needs a multiple of 10")
    per = count // 10
    picks = []
    for d in range(10):
        pool = np.flatnonzero(digits == d)
        if len(pool) < per:
            raise DatasetError(f"only {len(pool)} examples of digit {d}")
        picks.append(rng.choice(pool, size=per, replace=False))
    return np.sort(np.concatenate(picks))


def visible_on_probability(data: EncodedDataset) -> np.ndarray:
    """Per visible bit frequency of +1, clipped to ``[1/(2n), 1 - 1/(2n)]``."""
    n = len(data)
    p = (data.visible > 0).mean(axis=0)
    return np.clip(p, 1.0 / (2 * n), 1.0 - 1.0 / (2 * n))
