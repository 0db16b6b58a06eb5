"""Dataset ingestion, raw binary formats, augmentation, and a synthetic set.

Two on-disk formats are understood, both built from 3073-byte records
(1 label byte + 3x1024 pixel bytes, R plane then G then B, row-major):

* CIFAR-10 binary batches: 6 headerless files of exactly 10000 records.
* "RIMG" raw container: 16-byte header (magic "RIMG", u32 record count,
  u32 class count, 4 reserved bytes, little-endian) followed by records.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import DataFormatError

RECORD_BYTES = 3073
RIMG_MAGIC = b"RIMG"
_RIMG_HEADER = struct.Struct("<4sII4s")

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledImages:
    """Pixels in [0,1], RGB channel order, shape [N,3,32,32]; integer labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise DataFormatError(f"images must be [N,3,32,32], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError("labels length must match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "LabeledImages":
        idx = np.asarray(idx)
        return LabeledImages(self.images[idx], self.labels[idx], self.classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def _parse_records(buf: bytes, source: str, classes: int) -> LabeledImages:
    n_bytes = len(buf)
    if n_bytes % RECORD_BYTES != 0:
        raise DataFormatError(
            f"{source}: size {n_bytes} is not a multiple of {RECORD_BYTES}; "
            f"first partial record starts at byte offset {n_bytes - n_bytes % RECORD_BYTES}"
        )
    n = n_bytes // RECORD_BYTES
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{source}: label {labels[i]} out of range at record {i} (byte offset {i * RECORD_BYTES})"
        )
    pixels = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledImages(pixels, labels, classes)


def _encode_records(data: LabeledImages) -> bytes:
    n = len(data)
    raw = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    raw[:, 0] = data.labels.astype(np.uint8)
    raw[:, 1:] = np.round(data.images * 255.0).astype(np.uint8).reshape(n, 3072)
    return raw.tobytes()


def load_cifar10_file(path, expect_records: Optional[int] = 10000) -> LabeledImages:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e
    if expect_records is not None and len(buf) != expect_records * RECORD_BYTES:
        raise DataFormatError(
            f"{path}: expected {expect_records * RECORD_BYTES} bytes "
            f"({expect_records} records), got {len(buf)}; "
            f"mismatch begins at byte offset {min(len(buf), expect_records * RECORD_BYTES)}"
        )
    return _parse_records(buf, str(path), classes=10)


def load_cifar10_binary(directory, records_per_file: Optional[int] = 10000
                        ) -> Tuple[LabeledImages, LabeledImages]:
    """Load the 6 standard binary batch files: 50000 train + 10000 test images.

    `records_per_file` enforces the canonical batch size; pass None to accept
    any whole number of records (reduced-size corpora in the same layout).
    """
    parts = []
    for name in CIFAR_TRAIN_FILES:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DataFormatError(f"missing CIFAR-10 batch file: {path}")
        parts.append(load_cifar10_file(path, expect_records=records_per_file))
    train = LabeledImages(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )
    test = load_cifar10_file(os.path.join(directory, CIFAR_TEST_FILE),
                             expect_records=records_per_file)
    return train, test


def save_raw_labeled(path, data: LabeledImages) -> None:
    with open(path, "wb") as f:
        f.write(_RIMG_HEADER.pack(RIMG_MAGIC, len(data), data.classes, b"\x00" * 4))
        f.write(_encode_records(data))


def load_raw_labeled(path) -> LabeledImages:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e
    with f:
        head = f.read(_RIMG_HEADER.size)
        if len(head) < _RIMG_HEADER.size:
            raise DataFormatError(f"{path}: truncated RIMG header")
        magic, count, classes, _ = _RIMG_HEADER.unpack(head)
        if magic != RIMG_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {RIMG_MAGIC!r}")
        buf = f.read()
    if len(buf) != count * RECORD_BYTES:
        raise DataFormatError(
            f"{path}: header promises {count} records ({count * RECORD_BYTES} bytes), "
            f"payload has {len(buf)} bytes"
        )
    if count == 0:
        return LabeledImages(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64), classes)
    return _parse_records(buf, str(path), classes=classes)


# ------------------------------------------------------------- augmentation


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """4-pixel zero-pad, random 32x32 crop, horizontal flip with p=0.5."""
    padded = np.pad(img, ((0, 0), (4, 4), (4, 4)))
    dy, dx = rng.integers(0, 9, size=2)
    out = padded[:, dy:dy + 32, dx:dx + 32]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = augment(images[i], rng)
    return out


# ------------------------------------------------------------ synthetic set


def make_toy_dataset(classes: int = 10, per_class: int = 500, seed: int = 0) -> LabeledImages:
    """Oriented sinusoidal gratings; class fixes (orientation, frequency).

    Orientations live in [0, 90) degrees so no class is the mirror image of
    another (mirrored gratings are nearly indistinguishable to pooled conv
    features). Random phase and pixel noise keep it non-trivial; pixel values
    land on the uint8 grid so raw-format round-trips are exact.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    images = np.empty((classes * per_class, 3, 32, 32), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    n_orient = max(1, (classes + 1) // 2)
    for c in range(classes):
        theta = 0.5 * np.pi * (c % n_orient) / n_orient
        freq = 3.0 if c < n_orient else 6.0
        proj = (xx * np.cos(theta) + yy * np.sin(theta)) / 32.0
        for i in range(per_class):
            phase = rng.random() * 2 * np.pi
            grating = np.sin(2 * np.pi * freq * proj + phase)
            amp = 0.30 + 0.10 * rng.random(3)
            img = 0.5 + amp[:, None, None] * grating[None] + 0.12 * rng.standard_normal((3, 32, 32))
            images[c * per_class + i] = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
            labels[c * per_class + i] = c
    return LabeledImages(images, labels, classes)


# ------------------------------------------------------------ normalization


def normalization_stats(train: LabeledImages) -> Tuple[list, list]:
    mean = train.images.mean(axis=(0, 2, 3))
    std = train.images.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-6)
    return [float(v) for v in mean], [float(v) for v in std]


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float],
              dtype=np.float32) -> np.ndarray:
    m = np.asarray(mean, dtype=dtype).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=dtype).reshape(1, 3, 1, 1)
    return (images.astype(dtype) - m) / s


class BatchStream:
    """Deterministic shuffled epoch iterator with optional augmentation."""

    def __init__(self, data: LabeledImages, batch_size: int, rng: np.random.Generator,
                 mean: Sequence[float], std: Sequence[float], augment_data: bool = True,
                 dtype=np.float32):
        self.data = data
        self.batch_size = batch_size
        self.rng = rng
        self.mean, self.std = mean, std
        self.augment_data = augment_data
        self.dtype = dtype
        self._order = np.array([], dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        imgs = self.data.images[idx]
        if self.augment_data:
            imgs = augment_batch(imgs, self.rng)
        return normalize(imgs, self.mean, self.std, self.dtype), self.data.labels[idx]
