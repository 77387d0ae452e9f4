"""Datasets, IDX ingestion, synthetic data and Dirichlet label-skew partitioning."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ParseError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


class PartitionError(RuntimeError):
    pass


@dataclass(eq=False)
class Dataset:
    """Samples are stored flattened, one row each; ``sample_shape`` keeps the original layout."""

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    sample_shape: tuple[int, ...] = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if self.samples.shape[0] != n:
            raise ValueError(f"{self.samples.shape[0]} samples but {n} labels")
        if not self.sample_shape:
            self.sample_shape = tuple(self.samples.shape[1:])
        self.samples = self.samples.reshape(n, int(np.prod(self.sample_shape)))
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.samples.shape[1]

    def inputs(self, idx=None, shape: tuple[int, ...] | None = None) -> np.ndarray:
        """Rows at ``idx`` (all rows if None), reshaped to ``(n, *shape)``."""
        x = self.samples if idx is None else self.samples[idx]
        return x.reshape((x.shape[0],) + tuple(shape)) if shape else x

    def histogram(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[idx]
        return np.bincount(labels, minlength=self.num_classes)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes, self.sample_shape)


@dataclass(eq=False)
class ClientDataset:
    client_id: int
    parent: Dataset
    indices: np.ndarray
    class_histogram: np.ndarray = field(init=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.class_histogram = self.parent.histogram(self.indices)

    def __len__(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    alpha: float
    seed: int = 0
    min_samples_per_client: int = 10
    max_retries: int = 50

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("Dirichlet alpha must be > 0")
        if self.min_samples_per_client < 0:
            raise ValueError("min_samples_per_client must be >= 0")


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic", len(raw), path)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise ParseError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX header", len(raw), path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise ParseError(f"truncated data: need {count} bytes after header, have {len(raw) - header}", len(raw), path)
    if len(raw) > header + count:
        raise ParseError("trailing bytes after IDX payload", header + count, path)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped); pixels are scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels_raw = _read_bytes(labels_path)
    labels = _parse_idx(labels_raw, IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4, labels_path)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    shape = (1,) + tuple(images.shape[1:])
    return Dataset(images.reshape(images.shape[0], -1) / 255.0, labels.astype(np.int64), num_classes, shape)


def write_idx(path, array: np.ndarray) -> Path:
    """Write a uint8 array as IDX (3-D for images, 1-D for labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError(f"IDX writer supports 1-D labels or 3-D images, got ndim={array.ndim}")
    path = Path(path)
    path.write_bytes(struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes())
    return path


# -- synthetic -----------------------------------------------------------------


def synth_dataset(
    n_classes: int,
    n_per_class: int,
    feature_dim: int,
    separation: float,
    seed: int,
    noise: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian classes around random unit-direction centers scaled by ``separation``.

    The whole draw is mapped into [0, 1] with one affine transform, which
    leaves class geometry (and any nearest-centroid decision) unchanged.
    """
    if min(n_classes, n_per_class, feature_dim) <= 0:
        raise ValueError("n_classes, n_per_class and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_classes, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * directions
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + noise * rng.standard_normal((labels.size, feature_dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], n_classes)


def stratified_split(dataset: Dataset, n_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``n_per_class`` samples of every class; returns (rest, held_out)."""
    rng = np.random.default_rng(seed)
    held = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        held.append(rng.permutation(idx)[:n_per_class])
    held = np.sort(np.concatenate(held))
    rest = np.setdiff1d(np.arange(len(dataset)), held)
    return dataset.subset(rest), dataset.subset(held)


def random_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    if n >= len(dataset):
        return dataset
    idx = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:n])
    return dataset.subset(idx)


# -- partitioning ----------------------------------------------------------------


def dirichlet_partition(dataset: Dataset, cfg: PartitionConfig) -> list[ClientDataset]:
    """Label-skew split: each class's samples are divided across clients by a Dir(alpha) draw.

    If any client ends up below ``min_samples_per_client`` the whole partition
    is redrawn from the same generator, up to ``max_retries`` times.
    """
    if len(dataset) == 0:
        raise PartitionError("cannot partition an empty dataset")
    n = cfg.n_clients
    if n * cfg.min_samples_per_client > len(dataset):
        raise PartitionError(
            f"{n} clients x {cfg.min_samples_per_client} min samples exceeds dataset size {len(dataset)}"
        )
    rng = np.random.default_rng(cfg.seed)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    for attempt in range(cfg.max_retries):
        parts: list[list[np.ndarray]] = [[] for _ in range(n)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n, cfg.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].append(chunk)
        clients = [
            ClientDataset(k, dataset, np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64))
            for k, p in enumerate(parts)
        ]
        smallest = min(len(c) for c in clients)
        if smallest >= cfg.min_samples_per_client:
            if attempt:
                log.debug("partition accepted after %d redraws", attempt)
            return clients
    raise PartitionError(
        f"no partition with >= {cfg.min_samples_per_client} samples per client after {cfg.max_retries} draws; "
        "lower min_samples_per_client or raise alpha"
    )


def class_histogram(client: ClientDataset) -> np.ndarray:
    return client.class_histogram.copy()


def concentration(histograms: np.ndarray, top_k: int = 2) -> float:
    """Mean over clients of the share of samples held by each client's ``top_k`` largest classes."""
    h = np.asarray(histograms, dtype=np.float64)
    totals = h.sum(axis=1)
    keep = totals > 0
    top = np.sort(h[keep], axis=1)[:, ::-1][:, :top_k].sum(axis=1)
    return float(np.mean(top / totals[keep]))
