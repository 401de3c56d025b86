"""Rating data: file loading, deterministic splits, epoch-cycling batches.

Datasets are columnar and immutable after construction; raw IDs are densely
re-indexed and the raw<->dense maps are kept for traceability. Splitting is
by-record, uniform, and fully determined by the seed.
"""

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "validation", "test")


class ParseError(ValueError):
    """Malformed data file; message carries the path and line number."""


@dataclass(frozen=True)
class RatingRecord:
    row: int
    col: int
    value: float
    depth: int | None = None


@dataclass
class RatingDataset:
    """Observed entries of a rating matrix (or 3-way tensor).

    rows/cols/depths hold dense 0-based indices; depths is None for matrix
    data. split_labels (int8 codes indexing SPLITS) is None until split()
    assigns one label per record.
    """

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    dims: tuple
    depths: np.ndarray | None = None
    split_labels: np.ndarray | None = None
    row_ids: list = field(default_factory=list)
    col_ids: list = field(default_factory=list)
    depth_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.depths is not None:
            self.depths = np.asarray(self.depths, dtype=np.int64)
        n = self.rows.size
        if not (self.cols.size == n == self.values.size):
            raise ValueError("column arrays must share one length")
        if len(self.dims) not in (2, 3):
            raise ValueError(f"dims must be (m, n) or (m, n, d), got {self.dims}")
        if (len(self.dims) == 3) != (self.depths is not None):
            raise ValueError("depths present iff dims has three entries")
        if n:
            if self.rows.min() < 0 or self.rows.max() >= self.dims[0]:
                raise ValueError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.dims[1]:
                raise ValueError("col index out of range")
            if self.depths is not None and (
                    self.depths.min() < 0 or self.depths.max() >= self.dims[2]):
                raise ValueError("depth index out of range")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ratings must be finite")

    @property
    def n_records(self):
        return self.rows.size

    @property
    def is_tensor(self):
        return self.depths is not None

    def record(self, i):
        depth = int(self.depths[i]) if self.is_tensor else None
        return RatingRecord(int(self.rows[i]), int(self.cols[i]),
                            float(self.values[i]), depth)

    def iter_records(self):
        return (self.record(i) for i in range(self.n_records))

    def split_indices(self, name):
        if self.split_labels is None:
            raise ValueError("dataset has no split assignment; call split()")
        return np.flatnonzero(self.split_labels == SPLITS.index(name))

    def split_size(self, name):
        return self.split_indices(name).size

    def subset(self, name):
        """(indices, rows, cols, depths, values) of one split."""
        idx = self.split_indices(name)
        depths = self.depths[idx] if self.is_tensor else None
        return idx, self.rows[idx], self.cols[idx], depths, self.values[idx]

    def with_labels(self, labels):
        labels = np.asarray(labels, dtype=np.int8)
        if labels.size != self.n_records:
            raise ValueError("one label per record required")
        return RatingDataset(self.rows, self.cols, self.values, self.dims,
                             self.depths, labels,
                             self.row_ids, self.col_ids, self.depth_ids)


@dataclass(frozen=True)
class Batch:
    """A sampled subset of one split."""

    indices: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    split: str
    depths: np.ndarray | None = None

    @property
    def size(self):
        return self.rows.size


def _reindex(raw):
    """Dense re-index of raw IDs; returns (dense array, sorted raw list)."""
    ids, dense = np.unique(raw, return_inverse=True)
    return dense.astype(np.int64), ids.tolist()


def _parse_lines(path, n_fields, sep):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(sep) if sep else line.split()
            if len(parts) < n_fields:
                raise ParseError(f"{path}:{lineno}: expected at least "
                                 f"{n_fields} fields, got {len(parts)}")
            try:
                head = [int(p) for p in parts[:n_fields - 1]]
                head.append(float(parts[n_fields - 1]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append(head)
    if not rows:
        raise ParseError(f"{path}: file contains no records")
    return rows


def load_matrix(path, format="auto"):
    """Load "user item rating [timestamp]" lines into a RatingDataset.

    format: "tsv" (whitespace/tab separated), "::" (ratings.dat style), or
    "auto" to sniff the separator from the first non-empty line.
    """
    if format == "auto":
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    format = "::" if "::" in line else "tsv"
                    break
            else:
                raise ParseError(f"{path}: file contains no records")
    if format not in ("tsv", "::"):
        raise ValueError(f"unknown matrix format {format!r}")
    sep = "::" if format == "::" else None
    triples = _parse_lines(path, 3, sep)
    raw_u = np.array([t[0] for t in triples])
    raw_i = np.array([t[1] for t in triples])
    values = np.array([t[2] for t in triples])
    rows, row_ids = _reindex(raw_u)
    cols, col_ids = _reindex(raw_i)
    dims = (len(row_ids), len(col_ids))
    return RatingDataset(rows, cols, values, dims,
                         row_ids=row_ids, col_ids=col_ids)


def load_tensor(path):
    """Load "row col depth value" quads (comma, tab, or space separated)."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                sep = "," if "," in line else None
                break
        else:
            raise ParseError(f"{path}: file contains no records")
    quads = _parse_lines(path, 4, sep)
    raw_r = np.array([q[0] for q in quads])
    raw_c = np.array([q[1] for q in quads])
    raw_d = np.array([q[2] for q in quads])
    values = np.array([q[3] for q in quads])
    rows, row_ids = _reindex(raw_r)
    cols, col_ids = _reindex(raw_c)
    depths, depth_ids = _reindex(raw_d)
    dims = (len(row_ids), len(col_ids), len(depth_ids))
    return RatingDataset(rows, cols, values, dims, depths=depths,
                         row_ids=row_ids, col_ids=col_ids,
                         depth_ids=depth_ids)


def split(dataset, ratios=(0.5, 0.25, 0.25), seed=0):
    """Assign train/validation/test labels uniformly at random.

    Deterministic for a fixed seed; split sizes land within one record of
    the configured ratios (cumulative rounding).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries")
    if any(r < 0 or r > 1 for r in ratios):
        raise ValueError(f"ratios must lie in [0, 1], got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = dataset.n_records
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    bounds = np.round(np.cumsum(ratios) * n).astype(int)
    labels = np.empty(n, dtype=np.int8)
    labels[order[:bounds[0]]] = 0
    labels[order[bounds[0]:bounds[1]]] = 1
    labels[order[bounds[1]:]] = 2
    return dataset.with_labels(labels)


def save_split_manifest(dataset, path):
    """Persist the split assignment as "record-index,split-label" lines."""
    if dataset.split_labels is None:
        raise ValueError("dataset has no split assignment")
    with open(path, "w", encoding="utf-8") as fh:
        for i, code in enumerate(dataset.split_labels):
            fh.write(f"{i},{SPLITS[code]}\n")


def load_split_manifest(dataset, path):
    """Re-apply a persisted split assignment; exact rerun support."""
    labels = np.full(dataset.n_records, -1, dtype=np.int8)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                idx_s, name = line.split(",")
                labels[int(idx_s)] = SPLITS.index(name)
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if (labels < 0).any():
        raise ParseError(f"{path}: manifest does not cover every record")
    return dataset.with_labels(labels)


class BatchSampler:
    """Serves mini-batches of one split, cycling a reshuffled epoch order.

    Within an epoch batches are disjoint and jointly cover the split; a new
    permutation is drawn whenever the current one is exhausted. Each sampler
    owns its RNG state and must not be shared across runs.
    """

    def __init__(self, dataset, split_name, size, rng):
        if size < 1:
            raise ValueError(f"batch size must be >= 1, got {size}")
        self.dataset = dataset
        self.split = split_name
        self.indices = dataset.split_indices(split_name)
        if self.indices.size == 0:
            raise ValueError(f"split {split_name!r} is empty")
        self.size = int(size)
        self.rng = rng
        self._order = self.rng.permutation(self.indices)
        self._pos = 0

    @property
    def batches_per_epoch(self):
        return -(-self.indices.size // self.size)

    def sample_batch(self):
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        take = self._order[self._pos:self._pos + self.size]
        self._pos += take.size
        ds = self.dataset
        depths = ds.depths[take] if ds.is_tensor else None
        return Batch(take, ds.rows[take], ds.cols[take], ds.values[take],
                     self.split, depths)

    def epoch(self):
        """One full epoch of batches."""
        for _ in range(self.batches_per_epoch):
            yield self.sample_batch()


def sample_batch(dataset, split_name, size, rng):
    """One uniform batch without replacement from the named split."""
    sampler = BatchSampler(dataset, split_name, size, rng)
    return sampler.sample_batch()
