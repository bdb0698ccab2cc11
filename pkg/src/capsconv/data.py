"""Dataset files, augmentation, and input normalization.

Readers cover the two on-disk formats the trainer consumes: the big-endian
magic/dims image+label archive (gzip-transparent) and the fixed 3073-byte
label+RGB-planes record batches. Writers exist so tests can round-trip
synthetic files. Everything else here is pure array math: pixel shifts,
crops, global contrast normalization, and ZCA whitening.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 plane bytes


DEFAULT_DATA_DIR = os.environ.get("CAPSCONV_DATA", "/root/data")


class DataError(ValueError):
    """Dataset file problems."""


class BadMagic(DataError):
    pass


class Truncated(DataError):
    pass


class LabelRange(DataError):
    pass


def _open_maybe_gzip(path):
    with open(path, "rb") as probe:
        head = probe.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count, path):
    buf = f.read(count)
    if len(buf) != count:
        raise Truncated(f"{path}: wanted {count} bytes, got {len(buf)}")
    return buf


def read_idx_images(path) -> np.ndarray:
    """(N, H, W) uint8 from a magic-2051 image archive, gzipped or not."""
    with _open_maybe_gzip(path) as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, path))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"{path}: magic {magic}, expected {IDX_IMAGE_MAGIC}")
        data = _read_exact(f, n * h * w, path)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after {n} images")
    return np.frombuffer(data, dtype=np.uint8).reshape(n, h, w)


def read_idx_labels(path, num_classes: int | None = None) -> np.ndarray:
    """(N,) uint8 from a magic-2049 label archive, gzipped or not."""
    with _open_maybe_gzip(path) as f:
        magic, n = struct.unpack(">II", _read_exact(f, 8, path))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"{path}: magic {magic}, expected {IDX_LABEL_MAGIC}")
        data = _read_exact(f, n, path)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after {n} labels")
    labels = np.frombuffer(data, dtype=np.uint8)
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise LabelRange(
            f"{path}: label {labels.max()} out of range 0..{num_classes - 1}")
    return labels


def write_idx_images(path, images: np.ndarray):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def _find(dirs, names):
    for d in dirs:
        for name in names:
            for cand in (name, name + ".gz"):
                p = os.path.join(d, cand)
                if os.path.exists(p):
                    return p
    raise DataError(f"none of {names} (or .gz) found under {list(dirs)}")


def load_mnist(data_dir, split: str = "train"):
    """(images (N,28,28) uint8, labels (N,) uint8) for 'train' or 'test'.

    Looks in data_dir itself and in a conventional mnist/ subdirectory.
    """
    if split == "train":
        img, lab = ["train-images-idx3-ubyte"], ["train-labels-idx1-ubyte"]
    elif split == "test":
        img, lab = ["t10k-images-idx3-ubyte"], ["t10k-labels-idx1-ubyte"]
    else:
        raise DataError(f"split must be train or test, got {split!r}")
    dirs = [data_dir, os.path.join(data_dir, "mnist")]
    images = read_idx_images(_find(dirs, img))
    labels = read_idx_labels(_find(dirs, lab), num_classes=10)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


def read_cifar_batch(path):
    """One record batch -> ((N,32,32,3) uint8 images, (N,) uint8 labels)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw or len(raw) % CIFAR_RECORD:
        raise Truncated(
            f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].copy()
    if labels.max() >= 10:
        raise LabelRange(f"{path}: label {labels.max()} out of range 0..9")
    # 3 row-major 32x32 planes per record, R then G then B
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return images, labels


def write_cifar_batch(path, images, labels):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    planes = images.transpose(0, 3, 1, 2).reshape(images.shape[0], -1)
    rec = np.concatenate([labels[:, None], planes], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def load_cifar10(data_dir, split: str = "train"):
    """(images (N,32,32,3) uint8, labels (N,) uint8), train = 5 batches."""
    if split == "train":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch.bin"]
    else:
        raise DataError(f"split must be train or test, got {split!r}")
    dirs = [data_dir, os.path.join(data_dir, "cifar10"),
            os.path.join(data_dir, "cifar-10-batches-bin")]
    parts = [read_cifar_batch(_find(dirs, [n])) for n in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images, labels


def to_unit(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> [0, 1] floats."""
    return np.asarray(images, dtype=dtype) / dtype(255.0)


# ---------------------------------------------------------------------------
# augmentation

def shift_images(images: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate a batch by (dx right, dy down), zero-filling exposed pixels.

    shift_images(x, 2, 0) moves the pixel at (r, c) to (r, c + 2).
    """
    out = np.zeros_like(images)
    h, w = images.shape[1:3]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[:, dst_r, dst_c] = images[:, src_r, src_c]
    return out


def random_shift(images: np.ndarray, rng: np.random.Generator,
                 max_shift: int = 2) -> np.ndarray:
    """Independent per-image translation, offsets uniform on the integer square.

    Draw order is fixed (all dx, then all dy) so a given generator state
    always produces the same augmented batch.
    """
    n = images.shape[0]
    dx = rng.integers(-max_shift, max_shift + 1, size=n)
    dy = rng.integers(-max_shift, max_shift + 1, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = shift_images(images[i:i + 1], int(dx[i]), int(dy[i]))[0]
    return out


def random_crop(images: np.ndarray, size: int,
                rng: np.random.Generator) -> np.ndarray:
    """Per-image random size x size window; offsets drawn all-rows then all-cols."""
    n, h, w = images.shape[:3]
    if size > h or size > w:
        raise DataError(f"crop {size} larger than image {h}x{w}")
    top = rng.integers(0, h - size + 1, size=n)
    left = rng.integers(0, w - size + 1, size=n)
    out = np.empty((n, size, size) + images.shape[3:], dtype=images.dtype)
    for i in range(n):
        out[i] = images[i, top[i]:top[i] + size, left[i]:left[i] + size]
    return out


def center_crop(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[1:3]
    if size > h or size > w:
        raise DataError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return images[:, top:top + size, left:left + size]


# ---------------------------------------------------------------------------
# normalization

def gcn(images: np.ndarray, scale: float = 1.0, eps: float = 1e-9,
        alpha: float = 10.0) -> np.ndarray:
    """Per-image global contrast normalization.

    Each image is centered on its own mean (over every pixel and channel)
    and divided by max(eps, sqrt(alpha + population variance)).
    """
    x = np.asarray(images, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    var = np.mean(centered ** 2, axis=1, keepdims=True)
    denom = np.maximum(eps, np.sqrt(alpha + var))
    out = scale * centered / denom
    return out.reshape(x.shape)


@dataclass
class ZcaWhitener:
    """Mean image plus the symmetric whitening matrix, applied per image."""

    mean: np.ndarray       # (D,)
    transform: np.ndarray  # (D, D)

    def apply(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.mean.shape[0]:
            raise DataError(
                f"whitener fitted for {self.mean.shape[0]} values per image, "
                f"got {flat.shape[1]}")
        out = (flat - self.mean) @ self.transform
        return out.reshape(x.shape)


def fit_zca(images: np.ndarray, sample: int = 10000,
            rng: np.random.Generator | None = None,
            ridge: float = 0.1) -> ZcaWhitener:
    """Fit whitening on (up to) `sample` images drawn without replacement.

    The transform is U diag(1 / (sqrt(S) + ridge)) U^T from the
    eigendecomposition of the population covariance; the ridge keeps
    near-null directions from exploding.
    """
    x = np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)
    if rng is not None and x.shape[0] > sample:
        idx = np.sort(rng.choice(x.shape[0], size=sample, replace=False))
        x = x[idx]
    else:
        x = x[:sample]
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    s, u = np.linalg.eigh(cov)
    s = np.maximum(s, 0.0)  # clip eigh's tiny negative leakage
    transform = (u * (1.0 / (np.sqrt(s) + ridge))) @ u.T
    return ZcaWhitener(mean=mean, transform=transform)
