"""Feature datasets: binary/text file I/O, a synthetic seen/unseen generator,
and the two-per-category batch sampler.

The binary layout is little-endian: magic ``GAPF``, version u32, count u32,
dim u32, count*dim float32 features row-major, then count u32 labels. A text
variant (one ``label, v1, v2, ...`` row per line) is accepted for hand-made
fixtures. Features are held as float32, the container precision; training
code promotes to float64 per batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError, SamplingError
from .losses import Batch

MAGIC = b"GAPF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureDataset:
    features: np.ndarray  # (M, C) float32
    labels: np.ndarray  # (M,)
    split_tag: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DatasetError(
                f"features {self.features.shape} and labels {self.labels.shape} do not align"
            )
        if self.split_tag not in ("train", "test"):
            raise DatasetError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("features contain non-finite values")
        if self.size == 0:
            raise DatasetError("dataset is empty")
        if np.any(self.labels < 0) or np.any(self.labels >= 2**32):
            raise DatasetError("labels must fit an unsigned 32-bit integer")
        _, counts = np.unique(self.labels, return_counts=True)
        if np.any(counts < 2):
            raise DatasetError("every class needs at least 2 instances")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        return int(np.unique(self.labels).size)


def write_feature_file(dataset: FeatureDataset, path) -> None:
    """Canonical little-endian binary layout; deterministic byte-for-byte."""
    payload = bytearray()
    payload += _HEADER.pack(MAGIC, VERSION, dataset.size, dataset.dim)
    payload += dataset.features.astype("<f4", copy=False).tobytes(order="C")
    payload += dataset.labels.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(payload))


def _load_binary(data: bytes, split_tag: str) -> FeatureDataset:
    if len(data) < _HEADER.size:
        raise FormatError(f"file ends at byte {len(data)}, header needs {_HEADER.size}")
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    expected = _HEADER.size + count * dim * 4 + count * 4
    if len(data) != expected:
        raise FormatError(
            f"expected {expected} bytes for {count} x {dim} features plus labels, got {len(data)}"
        )
    features = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size)
    labels = np.frombuffer(data, dtype="<u4", count=count, offset=_HEADER.size + count * dim * 4)
    try:
        return FeatureDataset(features.reshape(count, dim).copy(), labels.copy(), split_tag)
    except DatasetError as e:
        raise DatasetError(f"loaded dataset is invalid: {e}") from e


def _load_text(text: str, split_tag: str) -> FeatureDataset:
    rows, labels = [], []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise FormatError(f"line {lineno}: need a label and at least one value")
        try:
            labels.append(int(parts[0]))
            rows.append([float(p) for p in parts[1:]])
        except ValueError as e:
            raise FormatError(f"line {lineno}: {e}") from e
        if dim is None:
            dim = len(parts) - 1
        elif len(parts) - 1 != dim:
            raise FormatError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
    if not rows:
        raise FormatError("text feature file contains no rows")
    return FeatureDataset(np.array(rows, dtype=np.float32), np.array(labels), split_tag)


def load_feature_file(path, split_tag: str = "train") -> FeatureDataset:
    """Read a binary feature file, falling back to the text variant."""
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        return _load_binary(data, split_tag)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"bad magic {data[:4]!r} at byte 0 and not a text file") from e
    return _load_text(text, split_tag)


@dataclass
class SyntheticSpec:
    """Gaussian class blobs on a sphere, optionally confounded by shared
    high-variance nuisance coordinates that carry no class signal."""

    dim: int = 32
    seen_classes: int = 16
    unseen_classes: int = 16
    instances_per_class: int = 20
    class_separation: float = 3.0
    intra_class_scale: float = 0.5
    nuisance_dims: int = 8
    nuisance_scale: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dim, self.seen_classes, self.unseen_classes) < 1:
            raise ValueError("dim and class counts must be positive")
        if self.instances_per_class < 2:
            raise ValueError("instances_per_class must be at least 2")
        if self.class_separation < 0 or self.intra_class_scale < 0 or self.nuisance_scale < 0:
            raise ValueError("scales must be nonnegative")
        if not 0 <= self.nuisance_dims < self.dim:
            raise ValueError("nuisance_dims must leave at least one signal dimension")


def gen_synthetic(spec: SyntheticSpec) -> tuple[FeatureDataset, FeatureDataset]:
    """Deterministic seen/unseen split with disjoint label ranges."""
    rng = np.random.default_rng(spec.seed)
    total = spec.seen_classes + spec.unseen_classes
    signal = spec.dim - spec.nuisance_dims

    centers = rng.normal(size=(total, signal))
    centers *= spec.class_separation / np.linalg.norm(centers, axis=1, keepdims=True)

    features = np.zeros((total * spec.instances_per_class, spec.dim))
    labels = np.repeat(np.arange(total), spec.instances_per_class)
    for k in range(total):
        rows = slice(k * spec.instances_per_class, (k + 1) * spec.instances_per_class)
        features[rows, :signal] = centers[k] + spec.intra_class_scale * rng.normal(
            size=(spec.instances_per_class, signal)
        )
        if spec.nuisance_dims:
            features[rows, signal:] = spec.nuisance_scale * rng.normal(
                size=(spec.instances_per_class, spec.nuisance_dims)
            )

    seen = labels < spec.seen_classes
    train = FeatureDataset(features[seen], labels[seen], "train")
    test = FeatureDataset(features[~seen], labels[~seen], "test")
    return train, test


def sample_batch(dataset: FeatureDataset, n_categories: int, rng: np.random.Generator) -> Batch:
    """Uniformly pick categories without replacement, two distinct instances
    each, and shuffle the resulting slots."""
    classes = np.unique(dataset.labels)
    if n_categories < 1:
        raise SamplingError(f"need at least one category, got {n_categories}")
    if classes.size < n_categories:
        raise SamplingError(
            f"dataset has {classes.size} classes, cannot sample {n_categories}"
        )
    chosen = rng.choice(classes, size=n_categories, replace=False)
    picked = np.empty(2 * n_categories, dtype=np.intp)
    for i, c in enumerate(chosen):
        members = np.flatnonzero(dataset.labels == c)
        picked[2 * i : 2 * i + 2] = rng.choice(members, size=2, replace=False)

    perm = rng.permutation(2 * n_categories)
    slot_of = np.empty_like(perm)
    slot_of[perm] = np.arange(2 * n_categories)
    positive = np.empty_like(perm)
    for i in range(n_categories):
        a, b = slot_of[2 * i], slot_of[2 * i + 1]
        positive[a], positive[b] = b, a

    idx = picked[perm]
    return Batch(dataset.features[idx].astype(np.float64), dataset.labels[idx], positive)
