"""Datasets, batching, flip augmentation and evaluation list files."""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .numcore import as_matrix, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ParseError(ValueError):
    """Malformed input file; the message names the byte offset or line."""


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.size == 0 and samples.ndim < 2:
            width = int(np.prod(self.image_shape)) if self.image_shape else 0
            samples = samples.reshape(0, width)
        self.samples = as_matrix(samples)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.samples.shape[0]:
            raise ValueError("one label per sample row required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)
            if int(np.prod(self.image_shape)) != self.samples.shape[1]:
                raise ValueError(f"image shape {self.image_shape} does not match row length")

    def __len__(self):
        return self.samples.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.class_count, self.image_shape)


def preprocess_pixels(raw) -> np.ndarray:
    """Map 8-bit pixel values with ``(v - 127.5) / 128``."""
    return (np.asarray(raw, dtype=np.float64) - 127.5) / 128.0


def _read_idx(path, expected_magic):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError(f"{path}: truncated header at byte offset {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"{path}: truncated header at byte offset {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = header + int(np.prod(dims))
    if len(data) < need:
        raise ParseError(f"{path}: truncated payload at byte offset {len(data)}, expected {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count=None) -> Dataset:
    """Read an IDX image/label file pair (e.g. MNIST) into a preprocessed Dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    samples = preprocess_pixels(images.reshape(n, h * w))
    return Dataset(samples, labels, class_count, (h, w, 1))


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (n, h, w) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


def blob_centers(class_count, dim, seed) -> np.ndarray:
    rng = make_rng(seed)
    c = rng.normal(size=(class_count, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def synth_blobs(class_count, dim, per_class, spread, seed) -> Dataset:
    """Gaussian clusters around unit-sphere centers, ``per_class`` samples each.

    Samples are grouped by class (class 0 first). The same seed always gives
    the same centers and noise.
    """
    if min(class_count, dim, per_class) < 1 or not spread > 0:
        raise ValueError("counts must be >= 1 and spread > 0")
    centers = blob_centers(class_count, dim, seed)
    rng = make_rng([seed, 1])
    labels = np.repeat(np.arange(class_count), per_class)
    samples = centers[labels] + rng.normal(scale=spread, size=(len(labels), dim))
    return Dataset(samples, labels, class_count)


def split_per_class(ds: Dataset, train_per_class: int):
    """Split into (first ``train_per_class`` of each class, the rest)."""
    train, test = [], []
    for j in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == j)
        train.extend(idx[:train_per_class])
        test.extend(idx[train_per_class:])
    return ds.subset(sorted(train)), ds.subset(sorted(test))


def hflip(images, shape) -> np.ndarray:
    """Mirror row-flattened ``(height, width, channels)`` images along the width."""
    images = as_matrix(images)
    h, w, c = shape
    if images.shape[1] != h * w * c:
        raise ValueError(f"row length {images.shape[1]} does not match shape {tuple(shape)}")
    return images.reshape(-1, h, w, c)[:, :, ::-1, :].reshape(images.shape[0], -1)


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    flipped: np.ndarray


def batches(ds: Dataset, batch_size: int, epoch_seed, augment=False) -> list:
    """One epoch of shuffled mini-batches; the last batch may be short.

    With ``augment`` on an image dataset every sample also appears mirrored,
    doubling the epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    flip = augment and ds.image_shape is not None
    order = make_rng(epoch_seed).permutation(2 * n if flip else n)
    out = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        idx = chunk % n if flip else chunk
        flipped = chunk >= n if flip else np.zeros(len(chunk), dtype=bool)
        x = ds.samples[idx]
        if flipped.any():
            x = x.copy()
            x[flipped] = hflip(x[flipped], ds.image_shape)
        out.append(Batch(x, ds.labels[idx], idx, flipped))
    return out


@dataclass
class PairList:
    entries: list

    def __len__(self):
        return len(self.entries)

    @property
    def same(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=bool)

    def index_arrays(self):
        a = np.array([e[0] for e in self.entries], dtype=np.int64)
        b = np.array([e[1] for e in self.entries], dtype=np.int64)
        return a, b


@dataclass
class TemplateSet:
    templates: dict

    def __len__(self):
        return len(self.templates)

    def ids(self):
        return list(self.templates)


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _check_index(v, limit, path, lineno):
    if v < 0 or (limit is not None and v >= limit):
        raise ParseError(f"{path}:{lineno}: index {v} out of range [0, {limit})")


def load_pairs(path, n_items=None) -> PairList:
    """Parse ``indexA indexB {0|1}`` lines; ``#`` starts a comment."""
    entries = []
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise ParseError(f"{path}:{lineno}: expected 'indexA indexB 0|1', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer index in {line!r}") from None
        _check_index(a, n_items, path, lineno)
        _check_index(b, n_items, path, lineno)
        entries.append((a, b, parts[2] == "1"))
    return PairList(entries)


def write_pairs(path, pairs: PairList):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, same in pairs.entries:
            fh.write(f"{a} {b} {int(same)}\n")


def load_templates(path, n_items=None) -> TemplateSet:
    """Parse ``templateId subjectId i,j,k`` lines into a TemplateSet."""
    templates = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 'templateId subjectId indices', got {line!r}")
        tid, subject, members = parts
        try:
            idx = [int(v) for v in members.split(",") if v != ""]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer index in {members!r}") from None
        if not idx:
            raise ParseError(f"{path}:{lineno}: template {tid} is empty")
        if tid in templates:
            raise ParseError(f"{path}:{lineno}: duplicate template id {tid}")
        for v in idx:
            _check_index(v, n_items, path, lineno)
        templates[tid] = (subject, idx)
    return TemplateSet(templates)


def write_templates(path, ts: TemplateSet):
    with open(path, "w", encoding="utf-8") as fh:
        for tid, (subject, idx) in ts.templates.items():
            fh.write(f"{tid} {subject} {','.join(str(i) for i in idx)}\n")


def balanced_pairs(labels, n_pairs, seed) -> PairList:
    """Deterministic half-same / half-different pairs over ``labels``.

    Needs at least one class with two members and at least two classes.
    """
    labels = np.asarray(labels)
    rng = make_rng(seed)
    by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    multi = [c for c, idx in by_class.items() if len(idx) >= 2]
    classes = list(by_class)
    if not multi or len(classes) < 2:
        raise ValueError("need two classes and a class with two samples")
    entries = []
    for i in range(n_pairs):
        if i % 2 == 0:
            c = multi[rng.integers(len(multi))]
            a, b = rng.choice(by_class[c], size=2, replace=False)
            entries.append((int(a), int(b), True))
        else:
            ca, cb = rng.choice(classes, size=2, replace=False)
            a = rng.choice(by_class[int(ca)])
            b = rng.choice(by_class[int(cb)])
            entries.append((int(a), int(b), False))
    return PairList(entries)


def chunk_templates(labels, size) -> TemplateSet:
    """Group each class's samples, in index order, into templates of ``size``."""
    labels = np.asarray(labels)
    templates = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        for t, start in enumerate(range(0, len(idx), size)):
            templates[f"c{c}t{t}"] = (str(c), [int(v) for v in idx[start:start + size]])
    return TemplateSet(templates)
