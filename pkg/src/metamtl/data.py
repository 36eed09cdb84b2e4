"""Dataset containers, IDX/DSET file loaders, label subsampling and splits."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, ParameterError


@dataclass
class LabeledDataset:
    """Examples of shape [C,H,W] scaled to [0,1], with optional integer labels."""

    inputs: np.ndarray
    labels: np.ndarray | None
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 4:
            raise DataError(f"inputs must be [n,C,H,W], got shape {self.inputs.shape}")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise DataError("inputs must be scaled to [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.inputs),):
                raise DataError(
                    f"{len(self.labels)} labels for {len(self.inputs)} inputs")
            if self.labels.size and (self.labels.min() < 0
                                     or self.labels.max() >= self.class_count):
                raise DataError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return LabeledDataset(self.inputs[idx], labels, self.class_count,
                              name or self.name)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, ...]
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ParameterError(f"split fraction {f} outside (0, 1]")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions sum to {sum(self.fractions)}, not 1")


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_u32_be(f, what: str) -> int:
    buf = f.read(4)
    if len(buf) != 4:
        raise FormatError(f"IDX file truncated while reading {what}")
    return struct.unpack(">I", buf)[0]


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> LabeledDataset:
    """Parse the big-endian IDX image/label pair into a dataset in [0,1]."""
    with open(images_path, "rb") as f:
        magic = _read_u32_be(f, "images magic")
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(
                f"images magic is 0x{magic:08x}, expected 0x{_IDX_IMAGE_MAGIC:08x}")
        count = _read_u32_be(f, "images count")
        rows = _read_u32_be(f, "images rows")
        cols = _read_u32_be(f, "images cols")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError("IDX file truncated while reading pixels")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic = _read_u32_be(f, "labels magic")
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(
                f"labels magic is 0x{magic:08x}, expected 0x{_IDX_LABEL_MAGIC:08x}")
        n_labels = _read_u32_be(f, "labels count")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise FormatError("IDX file truncated while reading labels")
        labels = np.frombuffer(raw, dtype=np.uint8)

    if n_labels != count:
        raise FormatError(f"images count {count} != labels count {n_labels}")
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels.astype(np.int64),
                          class_count=10, name=name)


_DSET_MAGIC = b"DSET"


def save_dset(path, data: LabeledDataset) -> None:
    """Write the generic little-endian DSET container (labels u32, pixels f32)."""
    if data.labels is None:
        raise DataError("DSET files require labels")
    c, h, w = data.input_shape
    with open(path, "wb") as f:
        f.write(_DSET_MAGIC)
        f.write(struct.pack("<5I", data.n, c, h, w, data.class_count))
        f.write(data.labels.astype("<u4").tobytes())
        f.write(data.inputs.astype("<f4").tobytes())


def load_dset(path, name: str | None = None) -> LabeledDataset:
    with open(path, "rb") as f:
        if f.read(4) != _DSET_MAGIC:
            raise FormatError("bad DSET magic")
        head = f.read(20)
        if len(head) != 20:
            raise FormatError("DSET file truncated while reading header")
        n, c, h, w, l = struct.unpack("<5I", head)
        raw = f.read(4 * n)
        if len(raw) != 4 * n:
            raise FormatError("DSET file truncated while reading labels")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        raw = f.read(4 * n * c * h * w)
        if len(raw) != 4 * n * c * h * w:
            raise FormatError("DSET file truncated while reading pixels")
        pixels = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, c, h, w)
    return LabeledDataset(pixels, labels, class_count=int(l),
                          name=name or str(path))


def subsample_labeled(data: LabeledDataset, fraction: float, seed: int,
                      return_indices: bool = False):
    """Stratified labeled subset of ceil(fraction * n_class) per class.

    Returns (labeled subset, unlabeled remainder); the remainder keeps its
    inputs but carries no labels at all.  With return_indices=True the
    selected and remaining index arrays are appended to the tuple.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction {fraction} outside (0, 1]")
    if data.labels is None:
        raise DataError("subsample_labeled needs a labeled dataset")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(data.class_count):
        idx = np.flatnonzero(data.labels == cls)
        if idx.size == 0:
            warnings.warn(f"class {cls} has no examples to subsample", stacklevel=2)
            continue
        take = int(np.ceil(fraction * idx.size))
        chosen.append(rng.permutation(idx)[:take])
    sel = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=np.int64)
    rest = np.setdiff1d(np.arange(data.n), sel)
    labeled = data.subset(sel, name=f"{data.name}/labeled")
    remainder = LabeledDataset(data.inputs[rest], None, data.class_count,
                               name=f"{data.name}/unlabeled")
    if return_indices:
        return labeled, remainder, sel, rest
    return labeled, remainder


def _allot(n: int, fractions: tuple[float, ...]) -> list[int]:
    # largest-remainder allocation: exhaustive and deterministic
    exact = [f * n for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    remainders = sorted(range(len(fractions)),
                        key=lambda i: (exact[i] - counts[i], i), reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % len(fractions)]] += 1
    return counts


def split(data: LabeledDataset, spec: SplitSpec) -> list[LabeledDataset]:
    """Disjoint, exhaustive, seed-reproducible split; stratified if requested."""
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[np.ndarray]] = [[] for _ in spec.fractions]
    if spec.stratified and data.labels is not None:
        groups = [np.flatnonzero(data.labels == cls) for cls in range(data.class_count)]
    else:
        groups = [np.arange(data.n)]
    for idx in groups:
        perm = rng.permutation(idx)
        start = 0
        for i, cnt in enumerate(_allot(len(idx), spec.fractions)):
            buckets[i].append(perm[start:start + cnt])
            start += cnt
    return [data.subset(np.sort(np.concatenate(b)), name=f"{data.name}/split{i}")
            for i, b in enumerate(buckets)]


def synth_blobs(k: int, per_cluster: int, d: int, spread: float, seed: int):
    """Gaussian blobs with known assignments.

    Returns (dataset, embedding rows): the dataset stores min-max normalized
    coordinates as [1,1,d] inputs with the blob index as label, while the raw
    coordinates double as an embedding matrix for clustering oracles.
    """
    if k < 2:
        raise ParameterError(f"need at least 2 blobs, got {k}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-10.0, 10.0, size=(k, d))
    points = np.repeat(centers, per_cluster, axis=0)
    if spread > 0:
        points = points + spread * rng.standard_normal(points.shape)
    labels = np.repeat(np.arange(k), per_cluster)
    lo, hi = points.min(), points.max()
    scaled = (points - lo) / (hi - lo) if hi > lo else np.zeros_like(points)
    dataset = LabeledDataset(scaled.reshape(-1, 1, 1, d), labels, class_count=k,
                             name=f"blobs(k={k},d={d})")
    return dataset, points
