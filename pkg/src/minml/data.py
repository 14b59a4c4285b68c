"""Datasets and their composition.

A dataset is random access: __len__ plus a pure __getitem__ (same index,
same value). Items are host numpy values; single arrays or tuples of
arrays. Composition wrappers keep that contract: Transform maps a
function over items, Batch stacks fixed-size runs, Shuffle permutes
indices with a reseedable bijection, and Prefetch reads ahead with
worker threads while preserving order and values.

Out-of-range indices raise IndexError, which also makes every dataset
directly iterable.
"""

import concurrent.futures
import gzip
import os
import struct

import numpy as np

from . import rng
from .errors import BatchShapeError, DataError, FormatError


class Dataset:
    def __len__(self):
        raise NotImplementedError

    def __getitem__(self, i):
        raise NotImplementedError


def _check_index(i, n):
    i = int(i)
    if i < 0:
        i += n
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for dataset of {n}")
    return i


class Transform(Dataset):
    def __init__(self, dataset, fn):
        self.dataset = dataset
        self.fn = fn

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, i):
        return self.fn(self.dataset[_check_index(i, len(self))])


class Batch(Dataset):
    """Fixed-size runs of consecutive items, stacked on a new leading axis."""

    def __init__(self, dataset, batch_size, drop_last=False):
        batch_size = int(batch_size)
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.drop_last = drop_last

    def __len__(self):
        n = len(self.dataset)
        if self.drop_last:
            return n // self.batch_size
        return (n + self.batch_size - 1) // self.batch_size

    def __getitem__(self, i):
        i = _check_index(i, len(self))
        start = i * self.batch_size
        stop = min(start + self.batch_size, len(self.dataset))
        items = [self.dataset[j] for j in range(start, stop)]
        if isinstance(items[0], tuple):
            return tuple(self._stack([it[k] for it in items], k) for k in range(len(items[0])))
        return self._stack(items, None)

    def _stack(self, values, field):
        arrays = [np.asarray(v) for v in values]
        first = arrays[0].shape
        for j, a in enumerate(arrays[1:], start=1):
            if a.shape != first:
                where = "" if field is None else f" in field {field}"
                raise BatchShapeError(
                    f"item {j}{where} has shape {a.shape}, expected {first}"
                )
        return np.stack(arrays)


class Shuffle(Dataset):
    """Deterministic permutation of the inner dataset; reseed() re-draws it."""

    def __init__(self, dataset, seed=0):
        self.dataset = dataset
        self.reseed(seed)

    def reseed(self, seed):
        self.seed = int(seed)
        n = len(self.dataset)
        keys = rng.raw(self.seed, 0, n)
        self._perm = np.argsort(keys, kind="stable")

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, i):
        return self.dataset[int(self._perm[_check_index(i, len(self))])]


class Prefetch(Dataset):
    """Reads ahead with worker threads; iteration order and values are
    identical to the inner dataset's."""

    def __init__(self, dataset, workers=1, buffer=4):
        if workers < 1 or buffer < 1:
            raise ValueError("workers and buffer must be positive")
        self.dataset = dataset
        self.workers = int(workers)
        self.buffer = int(buffer)

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, i):
        return self.dataset[_check_index(i, len(self))]

    def __iter__(self):
        n = len(self.dataset)
        pool = concurrent.futures.ThreadPoolExecutor(max_workers=self.workers)
        try:
            pending = []
            ahead = 0
            for j in range(min(self.buffer, n)):
                pending.append(pool.submit(self.dataset.__getitem__, j))
                ahead = j + 1
            for j in range(n):
                item = pending.pop(0).result()
                if ahead < n:
                    pending.append(pool.submit(self.dataset.__getitem__, ahead))
                    ahead += 1
                yield item
        finally:
            pool.shutdown(wait=False, cancel_futures=True)


# -- MNIST-format IDX files

_IMAGE_MAGIC = 0x803
_LABEL_MAGIC = 0x801


def _read_bytes(path):
    with open(path, "rb") as f:
        head = f.read(2)
        rest = f.read()
    data = head + rest
    if head == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _idx_header(data, path, magic_want, n_dims):
    need = 4 * (1 + n_dims)
    if len(data) < need:
        raise FormatError(f"{path}: header ends early", offset=len(data))
    magic = struct.unpack(">I", data[0:4])[0]
    if magic != magic_want:
        raise FormatError(
            f"{path}: magic 0x{magic:x}, expected 0x{magic_want:x}", offset=0
        )
    dims = struct.unpack(f">{n_dims}I", data[4:need])
    return dims, need


def load_mnist_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into a dataset.

    Items are (image, label): image f32 [1, rows, cols] scaled to [0, 1],
    label an i64 scalar.
    """
    img_data = _read_bytes(images_path)
    (count, rows, cols), offset = _idx_header(img_data, images_path, _IMAGE_MAGIC, 3)
    total = count * rows * cols
    if len(img_data) < offset + total:
        raise FormatError(f"{images_path}: pixel data ends early", offset=len(img_data))
    images = np.frombuffer(img_data, dtype=np.uint8, count=total, offset=offset)
    images = images.reshape(count, rows, cols)

    lbl_data = _read_bytes(labels_path)
    (lcount,), loffset = _idx_header(lbl_data, labels_path, _LABEL_MAGIC, 1)
    if len(lbl_data) < loffset + lcount:
        raise FormatError(f"{labels_path}: label data ends early", offset=len(lbl_data))
    if lcount != count:
        raise FormatError(f"{labels_path}: {lcount} labels for {count} images", offset=loffset)
    labels = np.frombuffer(lbl_data, dtype=np.uint8, count=lcount, offset=loffset)
    return _MnistDataset(images, labels)


class _MnistDataset(Dataset):
    def __init__(self, images, labels):
        self.images = images
        self.labels = labels

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        i = _check_index(i, len(self))
        img = self.images[i].astype(np.float32) / 255.0
        return img[None, :, :], np.int64(self.labels[i])


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(data_dir, split):
    """Locate the IDX pair for a split, tolerating .gz copies."""
    try:
        img_name, lbl_name = _MNIST_FILES[split]
    except KeyError:
        raise DataError(f"unknown split {split!r}; expected train or test") from None
    paths = []
    for name in (img_name, lbl_name):
        for candidate in (name, name + ".gz"):
            p = os.path.join(data_dir, candidate)
            if os.path.exists(p):
                paths.append(p)
                break
        else:
            raise DataError(f"missing {name}[.gz] under {data_dir}")
    return tuple(paths)


def mnist_dataset(data_dir, split):
    images_path, labels_path = find_mnist(data_dir, split)
    return load_mnist_idx(images_path, labels_path)


# -- synthetic data


class SynthBlobs(Dataset):
    """Gaussian class blobs, generated on demand from (seed, index).

    Class c's center is a block of consecutive coordinates raised to
    spacing, with block starts spread evenly over the vector, so classes
    occupy disjoint supports; when the vector is viewed as an image the
    blocks land in distinct spatial regions, which keeps the task easy
    for position-sensitive models too. Samples add sigma-scaled normal
    noise. With more classes than coordinates the centers fall back to
    single coordinates at growing magnitudes so they stay distinct.
    """

    SIGMA = 0.5
    SPACING = 4.0

    def __init__(self, n, classes=10, dim=784, seed=0, shape=None):
        if classes < 1 or dim < 1 or n < 0:
            raise ValueError("n, classes, and dim must be positive")
        self.n = int(n)
        self.classes = int(classes)
        self.dim = int(dim)
        self.seed = int(seed)
        self.shape = tuple(shape) if shape is not None else (dim,)
        if int(np.prod(self.shape)) != self.dim:
            raise ValueError(f"shape {self.shape} does not hold {self.dim} values")
        centers = np.zeros((self.classes, self.dim), dtype=np.float64)
        if self.dim >= self.classes:
            block = max(1, self.dim // (4 * self.classes))
            for c in range(self.classes):
                start = c * self.dim // self.classes
                centers[c, start:start + block] = self.SPACING
        else:
            for c in range(self.classes):
                centers[c, c % self.dim] = self.SPACING * (1 + c // self.dim)
        self._centers = centers
        self._stride = rng.normal_counters(self.dim)

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        i = _check_index(i, self.n)
        label = i % self.classes
        noise = rng.normal(self.seed, i * self._stride, self.dim)
        x = self._centers[label] + self.SIGMA * noise
        return x.astype(np.float32).reshape(self.shape), np.int64(label)


def synth_blobs(n, classes=10, dim=784, seed=0, shape=None):
    return SynthBlobs(n, classes, dim, seed, shape)
