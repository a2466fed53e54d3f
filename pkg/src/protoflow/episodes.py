"""Embedding datasets, their on-disk formats, and N-way K-shot episode sampling.

PFEB layout (little-endian)::

    magic "PFEB" | u32 version=1 | u32 dim | u64 record_count
    record_count x [u32 class_id | dim x f64]
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, FormatError, NonFiniteError, SamplingError, TruncatedFileError

PFEB_MAGIC = b"PFEB"
PFEB_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

SPLITS = ("train", "val", "test", "all")
TRANSDUCTIVE = "transductive"
INDUCTIVE = "inductive"
MODES = (TRANSDUCTIVE, INDUCTIVE)


class EmbeddingDataset:
    """Class-labelled embedding vectors, kept in record order.

    Record order is preserved so that writing a loaded file reproduces it
    byte for byte; :attr:`classes` gives the per-class grouping.
    """

    def __init__(self, features, labels, split: str = "all"):
        features = np.array(features, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        if features.ndim != 2:
            raise FormatError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise FormatError("labels must have one entry per feature row")
        if features.shape[0] == 0:
            raise FormatError("no records")
        if not np.all(np.isfinite(features)):
            raise NonFiniteError("embedding contains NaN or Inf")
        if np.any(labels < 0) or np.any(labels > 0xFFFFFFFF):
            raise FormatError("class ids must fit in u32")
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        self.features = features
        self.labels = labels
        self.split = split
        self._classes: Optional[dict[int, np.ndarray]] = None

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> dict[int, np.ndarray]:
        if self._classes is None:
            self._classes = {int(c): self.features[self.labels == c] for c in np.unique(self.labels)}
        return self._classes

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __repr__(self) -> str:
        return (f"EmbeddingDataset(split={self.split!r}, classes={len(self.classes)}, "
                f"dim={self.dim}, records={len(self)})")

    def subset(self, class_ids: Iterable[int], split: str = "all") -> "EmbeddingDataset":
        ids = np.array(sorted(int(c) for c in class_ids))
        mask = np.isin(self.labels, ids)
        return EmbeddingDataset(self.features[mask], self.labels[mask], split=split)

    def class_means(self) -> dict[int, np.ndarray]:
        """Per-class mean over all samples; the reference ("real") prototypes."""
        return {c: x.mean(axis=0) for c, x in self.classes.items()}

    def min_class_size(self) -> int:
        return min(len(x) for x in self.classes.values())

    def equals(self, other: "EmbeddingDataset") -> bool:
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


# -- synthesis ---------------------------------------------------------------

def synth_gaussian(num_classes: int, dim: int, samples_per_class: int, center_scale: float = 1.0,
                   noise_sigma: float = 0.35, seed: int = 0, split: str = "all") -> EmbeddingDataset:
    """Isotropic Gaussian clusters around centers drawn uniformly on a sphere."""
    if dim < 2:
        raise ConfigError("dim must be at least 2")
    if num_classes <= 0 or samples_per_class <= 0:
        raise ConfigError("num_classes and samples_per_class must be positive")
    if center_scale <= 0:
        raise ConfigError("center_scale must be positive")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers *= center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    features = np.repeat(centers, samples_per_class, axis=0)
    if noise_sigma > 0:
        features = features + noise_sigma * rng.standard_normal(features.shape)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return EmbeddingDataset(features, labels, split=split)


def split_classes(dataset: EmbeddingDataset, n_train: int, n_val: int,
                  n_test: Optional[int] = None) -> tuple[EmbeddingDataset, EmbeddingDataset, EmbeddingDataset]:
    """Partition classes (ascending id) into disjoint train/val/test datasets."""
    ids = dataset.class_ids
    if n_test is None:
        n_test = len(ids) - n_train - n_val
    if min(n_train, n_val, n_test) <= 0 or n_train + n_val + n_test > len(ids):
        raise ConfigError(f"cannot split {len(ids)} classes into {n_train}/{n_val}/{n_test}")
    train = dataset.subset(ids[:n_train], "train")
    val = dataset.subset(ids[n_train:n_train + n_val], "val")
    test = dataset.subset(ids[n_train + n_val:n_train + n_val + n_test], "test")
    return train, val, test


# -- file formats ------------------------------------------------------------

def save_pfeb(dataset: EmbeddingDataset, path) -> None:
    n, dim = dataset.features.shape
    record = np.dtype([("class_id", "<u4"), ("x", "<f8", (dim,))])
    rows = np.empty(n, dtype=record)
    rows["class_id"] = dataset.labels
    rows["x"] = dataset.features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PFEB_MAGIC, PFEB_VERSION, dim, n))
        fh.write(rows.tobytes())


def _parse_pfeb(raw: bytes, split: str) -> EmbeddingDataset:
    if len(raw) < _HEADER.size:
        raise TruncatedFileError("file shorter than PFEB header")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != PFEB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PFEB_MAGIC!r}")
    if version != PFEB_VERSION:
        raise FormatError(f"unsupported PFEB version {version}")
    if dim == 0:
        raise FormatError("dim must be positive")
    if count == 0:
        raise FormatError("no records")
    record = np.dtype([("class_id", "<u4"), ("x", "<f8", (dim,))])
    need = _HEADER.size + count * record.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"expected {need} bytes for {count} records, file has {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after last record")
    rows = np.frombuffer(raw, dtype=record, count=count, offset=_HEADER.size)
    return EmbeddingDataset(rows["x"].astype(np.float64), rows["class_id"].astype(np.int64), split=split)


def save_csv(dataset: EmbeddingDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id"] + [f"e{j}" for j in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def _parse_csv(path, split: str) -> EmbeddingDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file") from None
        dim = len(header) - 1
        expected = ["class_id"] + [f"e{j}" for j in range(dim)]
        if dim < 1 or [h.strip() for h in header] != expected:
            raise FormatError("CSV header must be class_id,e0,...,e{dim-1}")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise FormatError(f"line {lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
    if not rows:
        raise FormatError("no records")
    return EmbeddingDataset(np.array(rows), np.array(labels), split=split)


def load_embeddings(path, split: str = "all") -> EmbeddingDataset:
    """Read a PFEB binary or a ``class_id,e0,...`` CSV file."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.suffix.lower() == ".csv" and not raw.startswith(PFEB_MAGIC):
        return _parse_csv(path, split)
    return _parse_pfeb(raw, split)


# -- episodes ----------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    episodes_per_epoch: int = 100
    seed: int = 0
    mode: str = TRANSDUCTIVE

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError("n_way must be at least 2")
        if self.k_shot < 1:
            raise ConfigError("k_shot must be at least 1")
        if self.queries_per_class < 1:
            raise ConfigError("queries_per_class must be at least 1")
        if self.episodes_per_epoch < 1:
            raise ConfigError("episodes_per_epoch must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")


@dataclass
class Episode:
    """One N-way K-shot task with episode-local labels ``0..N-1``.

    Support rows are grouped by class (class 0 first). ``class_ids`` maps
    local labels back to dataset class ids.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    queries_per_class: int
    mode: str = TRANSDUCTIVE
    class_ids: tuple = field(default=())

    @property
    def dim(self) -> int:
        return self.support_x.shape[1]

    @property
    def unlabeled(self) -> np.ndarray:
        """Query features visible to the flow (empty in inductive mode)."""
        if self.mode == TRANSDUCTIVE:
            return self.query_x
        return np.zeros((0, self.dim))

    @property
    def n_visible(self) -> int:
        return len(self.support_x) + len(self.unlabeled)

    def support_onehot(self) -> np.ndarray:
        return np.eye(self.n_way)[self.support_y]

    def query_onehot(self) -> np.ndarray:
        return np.eye(self.n_way)[self.query_y]

    def with_mode(self, mode: str) -> "Episode":
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        return Episode(self.support_x, self.support_y, self.query_x, self.query_y, self.n_way,
                       self.k_shot, self.queries_per_class, mode, self.class_ids)


def episode_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent RNG for episode ``index`` of ``stream`` in a run seeded with ``seed``.

    Streams keep training, validation and test episode sequences apart.
    """
    return np.random.default_rng([int(seed), int(stream), int(index)])


def sample_episode(dataset: EmbeddingDataset, config: EpisodeConfig,
                   rng: np.random.Generator) -> Episode:
    ids = dataset.class_ids
    n, k, q = config.n_way, config.k_shot, config.queries_per_class
    if len(ids) < n:
        raise SamplingError(f"dataset has {len(ids)} classes, episode needs {n}")
    chosen = rng.choice(len(ids), size=n, replace=False)
    support, query = [], []
    class_ids = []
    for cls in chosen:
        cid = ids[int(cls)]
        pool = dataset.classes[cid]
        if len(pool) < k + q:
            raise SamplingError(f"class {cid} has {len(pool)} samples, episode needs {k + q}")
        picks = rng.choice(len(pool), size=k + q, replace=False)
        support.append(pool[picks[:k]])
        query.append(pool[picks[k:]])
        class_ids.append(cid)
    return Episode(
        support_x=np.concatenate(support),
        support_y=np.repeat(np.arange(n), k),
        query_x=np.concatenate(query),
        query_y=np.repeat(np.arange(n), q),
        n_way=n, k_shot=k, queries_per_class=q, mode=config.mode,
        class_ids=tuple(class_ids),
    )


def iter_episodes(dataset: EmbeddingDataset, config: EpisodeConfig, count: int,
                  seed: Optional[int] = None, start: int = 0, stream: int = 0):
    """Yield ``count`` episodes; episode ``i`` uses ``episode_rng(seed, start + i, stream)``."""
    seed = config.seed if seed is None else seed
    for i in range(start, start + count):
        yield sample_episode(dataset, config, episode_rng(seed, i, stream))


def check_disjoint(*datasets: EmbeddingDataset) -> None:
    seen: dict[int, str] = {}
    for ds in datasets:
        for c in ds.class_ids:
            if c in seen:
                raise ConfigError(f"class {c} appears in both {seen[c]} and {ds.split} splits")
            seen[c] = ds.split


def episode_from_arrays(support_x: np.ndarray, support_y: Sequence[int], query_x: np.ndarray,
                        n_way: int, mode: str = TRANSDUCTIVE) -> Episode:
    """Build an episode from raw arrays; query labels are unknown (set to -1)."""
    support_x = np.asarray(support_x, dtype=np.float64)
    support_y = np.asarray(support_y, dtype=np.int64)
    query_x = np.asarray(query_x, dtype=np.float64).reshape(-1, support_x.shape[1])
    counts = np.bincount(support_y, minlength=n_way)
    if len(counts) != n_way or np.any(counts == 0):
        raise SamplingError("every class needs at least one support sample")
    order = np.argsort(support_y, kind="stable")
    return Episode(support_x[order], support_y[order], query_x, -np.ones(len(query_x), dtype=np.int64),
                   n_way=n_way, k_shot=int(counts.min()), queries_per_class=0, mode=mode)
