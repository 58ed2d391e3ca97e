"""Datasets: the in-memory array store, loaders, and augmentation.

Images are kept as float32 arrays of shape (n, H, W, C) with values in
[0, 1]; labels are int64 class indices. Loaders return a (train, test)
pair of :class:`LabeledDataset`.

Available datasets:

* ``digits``  - scikit-learn's bundled handwritten digits (1797 real 8x8
  images), upscaled to 28x28 grayscale. Works offline; the desk-scale
  stand-in for MNIST when the IDX archives are not on disk.
* ``shapes``  - procedurally generated 10-class colored-shape images,
  the synthetic third dataset.
* ``mnist``   - ingested from the standard IDX archives (optionally
  gzipped) under the data directory.
* ``cifar10`` - ingested from the standard python pickle batches (or the
  distribution tarball) under the data directory.

The data directory is ``$FEDBACKDOOR_DATA_DIR`` or ``./data``.
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetUnavailableError
from .seeding import rng_for

DATA_DIR_ENV = "FEDBACKDOOR_DATA_DIR"

AUGMENT_TRANSFORMS = ("rotate", "crop", "flip")


@dataclass
class LabeledDataset:
    """Immutable image-classification dataset held in memory."""

    samples: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be (n, H, W, C), got shape {self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range for num_classes")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])  # type: ignore[return-value]

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.samples[idx], self.labels[idx], self.num_classes, name or self.name
        )

    def class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def data_dir(override: str | os.PathLike | None = None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ---------------------------------------------------------------------------
# digits (offline, real handwritten data)
# ---------------------------------------------------------------------------


def load_digits_dataset(
    image_size: int = 28, test_fraction: float = 0.2, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Scikit-learn's handwritten digits, upscaled and split per class."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images.astype(np.float32) / 16.0
    if image_size != 8:
        zoom = image_size / 8.0
        images = np.stack(
            [ndimage.zoom(im, zoom, order=1, mode="nearest") for im in images]
        )
    images = np.clip(images, 0.0, 1.0)[..., None]
    labels = raw.target.astype(np.int64)

    rng = rng_for(seed, "digits-split")
    train_idx, test_idx = [], []
    for cls in range(10):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_test = max(1, int(round(test_fraction * len(idx))))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    train = LabeledDataset(images[train_idx], labels[train_idx], 10, "digits")
    test = LabeledDataset(images[test_idx], labels[test_idx], 10, "digits")
    return train, test


# ---------------------------------------------------------------------------
# shapes (synthetic third dataset)
# ---------------------------------------------------------------------------

_SHAPE_BASE_COLORS = np.array(
    [
        (0.90, 0.20, 0.20),
        (0.20, 0.75, 0.25),
        (0.25, 0.35, 0.95),
        (0.95, 0.80, 0.15),
        (0.80, 0.25, 0.85),
        (0.20, 0.85, 0.85),
        (0.95, 0.55, 0.15),
        (0.55, 0.35, 0.15),
        (0.60, 0.85, 0.30),
        (0.85, 0.85, 0.85),
    ],
    dtype=np.float32,
)


def _shape_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary mask for one of the 10 shape classes, with pose jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cy = size / 2 + rng.uniform(-size * 0.08, size * 0.08)
    cx = size / 2 + rng.uniform(-size * 0.08, size * 0.08)
    r = size * rng.uniform(0.26, 0.36)
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy**2 + dx**2)
    thick = max(1.5, size * 0.08)

    if cls == 0:  # filled disk
        return dist <= r
    if cls == 1:  # ring
        return (dist <= r) & (dist >= r - thick)
    if cls == 2:  # filled square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if cls == 3:  # square outline
        inside = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
        core = (np.abs(dy) <= r * 0.85 - thick) & (np.abs(dx) <= r * 0.85 - thick)
        return inside & ~core
    if cls == 4:  # plus
        return ((np.abs(dy) <= thick) | (np.abs(dx) <= thick)) & (dist <= r * 1.2)
    if cls == 5:  # diagonal cross
        return ((np.abs(dy - dx) <= thick * 1.2) | (np.abs(dy + dx) <= thick * 1.2)) & (
            dist <= r * 1.2
        )
    if cls == 6:  # upward triangle
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.55)
    if cls == 7:  # horizontal stripes
        period = max(3.0, size * rng.uniform(0.14, 0.2))
        return (np.mod(yy + rng.uniform(0, period), period) < period / 2) & (dist <= r * 1.25)
    if cls == 8:  # vertical stripes
        period = max(3.0, size * rng.uniform(0.14, 0.2))
        return (np.mod(xx + rng.uniform(0, period), period) < period / 2) & (dist <= r * 1.25)
    if cls == 9:  # checkerboard
        period = max(3.0, size * rng.uniform(0.2, 0.28))
        return (
            (np.mod(yy, period) < period / 2) ^ (np.mod(xx, period) < period / 2)
        ) & (dist <= r * 1.25)
    raise ValueError(f"unknown shape class {cls}")


def synthetic_shapes(
    n_train_per_class: int = 300,
    n_test_per_class: int = 60,
    image_size: int = 32,
    channels: int = 3,
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Procedural 10-class colored-shape dataset; deterministic under seed."""

    def render(split: str, per_class: int) -> LabeledDataset:
        rng = rng_for(seed, "shapes", split)
        n = per_class * 10
        images = np.empty((n, image_size, image_size, channels), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        i = 0
        for cls in range(10):
            for _ in range(per_class):
                mask = _shape_mask(cls, image_size, rng)
                color = np.clip(
                    _SHAPE_BASE_COLORS[cls] + rng.uniform(-0.12, 0.12, size=3), 0.05, 1.0
                )
                bg = rng.uniform(0.0, 0.12)
                img = np.full((image_size, image_size, 3), bg, dtype=np.float32)
                img[mask] = color
                img += rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)
                img = np.clip(img, 0.0, 1.0)
                if channels == 1:
                    img = img.mean(axis=2, keepdims=True)
                images[i] = img
                labels[i] = cls
                i += 1
        return LabeledDataset(images, labels, 10, "shapes")

    return render("train", n_train_per_class), render("test", n_test_per_class)


# ---------------------------------------------------------------------------
# MNIST (IDX archives)
# ---------------------------------------------------------------------------


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        magic = struct.unpack(">I", f.read(4))[0]
        ndim = magic & 0xFF
        dtype_code = (magic >> 8) & 0xFF
        if dtype_code != 0x08:  # unsigned byte, the only type MNIST uses
            raise DatasetUnavailableError(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    return data.reshape(dims)


def _find_idx_file(root: Path, stem: str) -> Path:
    for candidate in (
        root / stem,
        root / f"{stem}.gz",
        root / "mnist" / stem,
        root / "mnist" / f"{stem}.gz",
        root / "MNIST" / "raw" / stem,
        root / "MNIST" / "raw" / f"{stem}.gz",
    ):
        if candidate.is_file():
            return candidate
    raise DatasetUnavailableError(
        f"MNIST file {stem}[.gz] not found under {root}; place the IDX archives "
        f"there or set ${DATA_DIR_ENV}"
    )


def load_mnist(
    data_root: str | os.PathLike | None = None,
) -> tuple[LabeledDataset, LabeledDataset]:
    """MNIST from the standard IDX archives (raises if they are absent)."""
    root = data_dir(data_root)

    def split(images_stem: str, labels_stem: str) -> LabeledDataset:
        images = _read_idx(_find_idx_file(root, images_stem)).astype(np.float32) / 255.0
        labels = _read_idx(_find_idx_file(root, labels_stem)).astype(np.int64)
        return LabeledDataset(images[..., None], labels, 10, "mnist")

    return (
        split("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    )


# ---------------------------------------------------------------------------
# CIFAR10 (python pickle batches)
# ---------------------------------------------------------------------------


def _cifar_batch_arrays(raw: dict) -> tuple[np.ndarray, np.ndarray]:
    data = raw[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    labels = np.asarray(raw[b"labels"], dtype=np.int64)
    return data.astype(np.float32) / 255.0, labels


def load_cifar10(
    data_root: str | os.PathLike | None = None,
) -> tuple[LabeledDataset, LabeledDataset]:
    """CIFAR-10 from extracted pickle batches or the distribution tarball."""
    root = data_dir(data_root)
    batch_dir = root / "cifar-10-batches-py"
    if not batch_dir.is_dir():
        tarball = root / "cifar-10-python.tar.gz"
        if tarball.is_file():
            with tarfile.open(tarball, "r:gz") as tf:
                tf.extractall(root)
        if not batch_dir.is_dir():
            raise DatasetUnavailableError(
                f"CIFAR-10 not found: expected {batch_dir} or {tarball}"
            )

    def load_batches(names: list[str]) -> LabeledDataset:
        images, labels = [], []
        for name in names:
            path = batch_dir / name
            if not path.is_file():
                raise DatasetUnavailableError(f"CIFAR-10 batch missing: {path}")
            with open(path, "rb") as f:
                x, y = _cifar_batch_arrays(pickle.load(f, encoding="bytes"))
            images.append(x)
            labels.append(y)
        return LabeledDataset(np.concatenate(images), np.concatenate(labels), 10, "cifar10")

    return (
        load_batches([f"data_batch_{i}" for i in range(1, 6)]),
        load_batches(["test_batch"]),
    )


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

DATASET_LOADERS = {
    "digits": lambda data_root=None, **kw: load_digits_dataset(**kw),
    "shapes": lambda data_root=None, **kw: synthetic_shapes(**kw),
    "mnist": lambda data_root=None, **kw: load_mnist(data_root),
    "cifar10": lambda data_root=None, **kw: load_cifar10(data_root),
}


def load_dataset(
    name: str, data_root: str | os.PathLike | None = None, **kwargs
) -> tuple[LabeledDataset, LabeledDataset]:
    try:
        loader = DATASET_LOADERS[name]
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(DATASET_LOADERS)}") from None
    return loader(data_root=data_root, **kwargs)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _transform_image(image: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = image.shape
    if kind == "flip":
        return image[:, ::-1, :].copy()
    if kind == "rotate":
        angle = rng.uniform(-15.0, 15.0)
        out = ndimage.rotate(image, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if kind == "crop":
        pad = max(2, h // 10)
        padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        oy = rng.integers(0, 2 * pad + 1)
        ox = rng.integers(0, 2 * pad + 1)
        return padded[oy : oy + h, ox : ox + w, :].copy()
    raise ValueError(f"unknown transform {kind!r}; expected one of {AUGMENT_TRANSFORMS}")


def augment(
    dataset: LabeledDataset,
    min_size: int,
    transforms: tuple[str, ...] | list[str] = AUGMENT_TRANSFORMS,
    seed: int = 0,
) -> LabeledDataset:
    """Pad a (client's) dataset to at least ``min_size`` samples.

    The whole set is replicated ceil(min_size / n) times so per-class label
    counts are multiplied by an exact integer; replicas get one random
    transform each (plain copies when ``transforms`` is empty, so padding
    always succeeds). Returns the input unchanged when already large enough.
    """
    for t in transforms:
        if t not in AUGMENT_TRANSFORMS:
            raise ValueError(f"unknown transform {t!r}; expected one of {AUGMENT_TRANSFORMS}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot augment an empty dataset")
    if n >= min_size:
        return dataset

    copies = -(-min_size // n) - 1  # ceil(min_size / n) - 1 extra passes
    rng = rng_for(seed, "augment", dataset.name)
    new_samples = [dataset.samples]
    new_labels = [dataset.labels]
    for _ in range(copies):
        batch = np.empty_like(dataset.samples)
        for i, image in enumerate(dataset.samples):
            if transforms:
                kind = transforms[rng.integers(0, len(transforms))]
                batch[i] = _transform_image(image, kind, rng)
            else:
                batch[i] = image
        new_samples.append(batch)
        new_labels.append(dataset.labels.copy())
    return LabeledDataset(
        np.concatenate(new_samples), np.concatenate(new_labels), dataset.num_classes, dataset.name
    )
