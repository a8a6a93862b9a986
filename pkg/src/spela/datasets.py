"""Loaders for IDX image files, CIFAR binary batches and SPFT feature files.

Pixel data is scaled to [0, 1] and held as float32 to keep CIFAR-sized sets
in memory; training code casts each batch to float64.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_COLOR_MAGIC = 0x00000804
SPFT_MAGIC = b"SPFT"
_SPFT_HEADER = struct.Struct("<4sIII")
CIFAR_PIXELS = 3072


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    normalization: str = "scale01"
    image_shape: tuple | None = None
    name: str = ""
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.n_classes < 1:
            raise DatasetFormatError("n_classes must be positive")
        if len(self.samples) == 0:
            raise DatasetFormatError("empty dataset")
        if len(self.samples) != len(self.labels):
            raise DatasetFormatError(
                f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DatasetFormatError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return int(np.prod(self.samples.shape[1:]))

    def flat(self) -> np.ndarray:
        return self.samples.reshape(len(self), -1)

    def images(self) -> np.ndarray:
        """Samples as (n, C, H, W)."""
        if self.samples.ndim == 4:
            return self.samples
        if self.image_shape is None:
            raise DatasetFormatError(f"{self.name or 'dataset'} has no image shape")
        return self.samples.reshape(len(self), *self.image_shape)

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.n_classes,
                              self.normalization, self.image_shape, self.name,
                              dict(self.checksums))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected: tuple[int, ...], what: str) -> np.ndarray:
    if len(raw) < 8:
        raise DatasetFormatError(f"truncated IDX {what} file")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in expected:
        raise DatasetFormatError(f"bad IDX {what} magic 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DatasetFormatError(f"truncated IDX {what} header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    size = int(np.prod(dims))
    if len(raw) - hdr != size:
        raise DatasetFormatError(
            f"IDX {what} payload is {len(raw) - hdr} bytes, header says {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None,
             name: str = "") -> LabeledDataset:
    """Parse an IDX image/label pair (optionally gzipped).

    Gray images (magic 0x803) become (n, 1, H, W); colour images (0x804,
    stored H x W x C) become (n, C, H, W). Samples are kept flat.
    """
    images = _parse_idx(_read_bytes(images_path), (IDX_IMAGES_MAGIC, IDX_COLOR_MAGIC), "images")
    labels = _parse_idx(_read_bytes(labels_path), (IDX_LABELS_MAGIC,), "labels")
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 3:
        shape = (1,) + images.shape[1:]
    else:
        images = images.transpose(0, 3, 1, 2)
        shape = images.shape[1:]
    X = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    y = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1
    sums = {str(images_path): sha256_file(images_path), str(labels_path): sha256_file(labels_path)}
    return LabeledDataset(X, y, k, "scale01", tuple(shape), name, sums)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, H, W) or (n, H, W, C) and labels as IDX files."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise TypeError("IDX writer expects uint8 arrays")
    magic = IDX_IMAGES_MAGIC if images.ndim == 3 else IDX_COLOR_MAGIC
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{images.ndim}I", *images.shape))
        f.write(np.ascontiguousarray(images).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                 stem.replace("-idx", ".idx") + ".gz"):
        p = directory / cand
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_idx_dir(directory, split: str = "train", n_classes: int = 10,
                 name: str = "") -> LabeledDataset:
    """Load a split from a directory laid out like the MNIST distribution
    (also used for KMNIST, Fashion-MNIST and converted SVHN)."""
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(directory, img), _find(directory, lab), n_classes,
                    name=name or directory.name)


def load_cifar(binary_dir, variant: str = "C10", split: str = "train") -> LabeledDataset:
    """Parse CIFAR-10/100 binary batches into flat (n, 3072) samples."""
    binary_dir = Path(binary_dir)
    variant = variant.upper()
    if variant == "C10":
        files = ([f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
        label_bytes, n_classes = 1, 10
    elif variant == "C100":
        files = ["train.bin"] if split == "train" else ["test.bin"]
        label_bytes, n_classes = 2, 100
    else:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    rec = label_bytes + CIFAR_PIXELS
    xs, ys, sums = [], [], {}
    for fname in files:
        p = binary_dir / fname
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size == 0 or raw.size % rec:
            raise DatasetFormatError(f"{p}: size {raw.size} is not a multiple of {rec}")
        raw = raw.reshape(-1, rec)
        # CIFAR-100 records are (coarse, fine); the fine label is the class
        ys.append(raw[:, label_bytes - 1].astype(np.int64))
        xs.append(raw[:, label_bytes:])
        sums[str(p)] = sha256_file(p)
    X = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    y = np.concatenate(ys)
    return LabeledDataset(X, y, n_classes, "scale01", (3, 32, 32),
                          f"cifar{variant[1:]}", sums)


def write_features(path, samples: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
    samples = np.asarray(samples, dtype="<f4")
    labels = np.asarray(labels)
    if samples.ndim != 2 or len(samples) != len(labels):
        raise ValueError("features must be (n, dim) with one label per row")
    with open(path, "wb") as f:
        f.write(_SPFT_HEADER.pack(SPFT_MAGIC, samples.shape[0], samples.shape[1], n_classes))
        f.write(samples.tobytes())
        f.write(labels.astype("<u4").tobytes())


def load_features(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _SPFT_HEADER.size:
        raise DatasetFormatError("truncated SPFT header")
    magic, n, dim, n_classes = _SPFT_HEADER.unpack_from(raw)
    if magic != SPFT_MAGIC:
        raise DatasetFormatError(f"bad SPFT magic {magic!r}")
    if n_classes == 0:
        raise DatasetFormatError("SPFT file declares zero classes")
    off = _SPFT_HEADER.size
    need = off + n * dim * 4 + n * 4
    if len(raw) != need:
        raise DatasetFormatError(f"SPFT file is {len(raw)} bytes, expected {need}")
    X = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).copy()
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=off + n * dim * 4).astype(np.int64)
    if not np.all(np.isfinite(X)):
        raise DatasetFormatError("non-finite feature values")
    return LabeledDataset(X, y, int(n_classes), "none", None, Path(path).stem,
                          {str(path): sha256_file(path)})


def subsample(data: LabeledDataset, fraction: float, rng: np.random.Generator) -> LabeledDataset:
    """Class-stratified random subset keeping ``round(fraction * count)`` per class."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1:
        return data
    keep = []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            continue
        k = int(round(fraction * idx.size))
        if k == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} empty")
        keep.append(rng.choice(idx, size=k, replace=False))
    keep = np.sort(np.concatenate(keep))
    return data.take(keep)


def train_test_split(data: LabeledDataset, test_fraction: float,
                     rng: np.random.Generator) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split, for sources that ship without a test partition."""
    test_idx = []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        k = int(round(test_fraction * idx.size))
        test_idx.append(rng.choice(idx, size=k, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(data), dtype=bool)
    mask[test_idx] = False
    return data.take(np.flatnonzero(mask)), data.take(test_idx)
