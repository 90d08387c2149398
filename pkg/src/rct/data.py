"""Datasets: seeded Gaussian blobs and MNIST-style IDX files."""

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, IDXParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_shape(self):
        return self.X_train.shape[1:]


def split(X, y, rng, n_classes, train_fraction=TRAIN_FRACTION):
    """Seeded shuffle followed by a train/test cut."""
    perm = rng.permutation(len(X))
    n_train = int(round(train_fraction * len(X)))
    tr, te = perm[:n_train], perm[n_train:]
    return Dataset(X[tr], y[tr], X[te], y[te], n_classes)


def generate_synthetic(n_classes=4, n_features=8, n_samples=2000, noise=0.5, seed=0,
                       clusters_per_class=1, labels="source"):
    """Gaussian blobs around centers drawn from a standard normal.

    Each class owns ``clusters_per_class`` centers and samples are spread
    evenly over all centers.  With ``labels="nearest"`` a sample takes the
    class of the center closest to it rather than the one that generated
    it, which makes the classes separable with piecewise-linear borders.
    Returns an 80/20 :class:`Dataset`.
    """
    if n_classes < 2 or n_features < 1 or clusters_per_class < 1:
        raise DomainError("need n_classes >= 2, n_features >= 1, clusters_per_class >= 1")
    if n_samples < 2 * n_classes:
        raise DomainError(f"n_samples must be >= 2 * n_classes, got {n_samples}")
    if not noise >= 0:
        raise DomainError(f"noise must be >= 0, got {noise}")
    if labels not in ("source", "nearest"):
        raise DomainError(f"labels must be 'source' or 'nearest', got {labels!r}")
    rng = np.random.default_rng(seed)
    n_centers = n_classes * clusters_per_class
    centers = rng.normal(size=(n_centers, n_features))
    which = np.arange(n_samples) % n_centers
    rng.shuffle(which)
    X = centers[which] + noise * rng.normal(size=(n_samples, n_features))
    if labels == "nearest":
        which = ((X[:, None, :] - centers[None]) ** 2).sum(axis=-1).argmin(axis=1)
    y = which % n_classes
    return split(X, y, rng, n_classes)


def _read_header(buf, magic, path):
    if len(buf) < 8:
        raise IDXParseError(f"{path}: file too short for IDX header", len(buf) if buf else 0)
    got, count = struct.unpack_from(">II", buf, 0)
    if got != magic:
        raise IDXParseError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    return count


def read_idx_images(path):
    with open(path, "rb") as f:
        buf = f.read()
    count = _read_header(buf, IDX_IMAGES_MAGIC, path)
    if len(buf) < 16:
        raise IDXParseError(f"{path}: missing image dimensions", len(buf))
    rows, cols = struct.unpack_from(">II", buf, 8)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise IDXParseError(f"{path}: truncated pixel data ({len(buf)} of {need} bytes)", len(buf))
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path):
    with open(path, "rb") as f:
        buf = f.read()
    count = _read_header(buf, IDX_LABELS_MAGIC, path)
    if len(buf) < 8 + count:
        raise IDXParseError(f"{path}: truncated label data ({len(buf)} of {8 + count} bytes)", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def load_idx(image_path, label_path):
    """Images scaled to [0, 1] with shape ``(N, 1, rows, cols)`` and integer labels."""
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise IDXParseError(
            f"{label_path}: {len(labels)} labels for {len(images)} images", 4)
    X = images.astype(np.float64)[:, None, :, :] / 255.0
    return X, labels.astype(np.int64)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_idx_dataset(image_path, label_path, seed=0, flatten=False, limit=None):
    X, y = load_idx(image_path, label_path)
    if limit is not None:
        X, y = X[:limit], y[:limit]
    if flatten:
        X = X.reshape(len(X), -1)
    n_classes = int(y.max()) + 1 if len(y) else 0
    return split(X, y, np.random.default_rng(seed), max(n_classes, 2))
