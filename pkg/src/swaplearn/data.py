"""Datasets, synthetic generators, CSV round-trip, and node partitioning.

Everything here is deterministic given the seed, and every array held by a
:class:`Dataset` or :class:`Partition` is frozen (non-writeable) so that
shards can be shared across threads without copies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

_HEADER_FIELD = re.compile(r"^f(\d+)$")

SPLIT_MODES = ("shuffled-iid", "contiguous", "by-label-heterogeneous")


def _frozen(a, dtype=None):
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """Points with optional labels.

    Parameters
    ----------
    points : ndarray, shape (N, n)
        Feature rows, float64. Must be finite.
    labels : ndarray, shape (N,), optional
        Targets, float64 or int64. Must be finite and aligned with rows.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite values")
        object.__setattr__(self, "points", _frozen(pts))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.dtype.kind not in "if":
                raise ValueError(f"labels must be numeric, got dtype {lab.dtype}")
            lab = lab.astype(np.int64) if lab.dtype.kind == "i" else lab.astype(np.float64)
            if lab.shape != (pts.shape[0],):
                raise ValueError(
                    f"labels shape {lab.shape} does not match {pts.shape[0]} rows"
                )
            if not np.isfinite(lab).all():
                raise ValueError("labels contain non-finite values")
            object.__setattr__(self, "labels", _frozen(lab))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


@dataclass(frozen=True)
class SplitSpec:
    """How to carve a dataset into node shards."""

    mode: str
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class Partition:
    """Disjoint shards of a source dataset.

    ``provenance[k][i]`` is the source row index of shard k's row i; the
    concatenation of all provenance arrays is a permutation of the source rows.
    """

    shards: tuple[Dataset, ...]
    provenance: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.shards) != len(self.provenance):
            raise ValueError("one provenance array per shard required")
        object.__setattr__(
            self, "provenance", tuple(_frozen(p, np.int64) for p in self.provenance)
        )

    @property
    def k(self) -> int:
        return len(self.shards)

    @property
    def total_points(self) -> int:
        return sum(s.n_points for s in self.shards)


def generate_regression(n_points, dim, weights, intercept=0.0, noise_sigma=0.0, seed=0):
    """Linear-model dataset: x ~ U[-1,1]^dim, y = <w,x> + b + N(0, sigma^2).

    Returns a labeled :class:`Dataset` with float64 labels. Same seed, same
    bits.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dim,):
        raise ValueError(f"weights must have shape ({dim},), got {w.shape}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n_points, dim))
    y = x @ w + float(intercept) + rng.normal(0.0, noise_sigma, size=n_points)
    return Dataset(x, y)


def generate_clusters(n_per_cluster, centers, spread, shape="gaussian", seed=0):
    """Blobs around given centers, labeled by cluster index.

    ``shape="gaussian"`` draws isotropic N(center, spread^2); ``"uniform-box"``
    draws uniformly from the axis-aligned box center +- spread, so every point
    lies within l-inf distance ``spread`` of its center.
    """
    if n_per_cluster < 1:
        raise ValueError("n_per_cluster must be >= 1")
    if spread <= 0:
        raise ValueError("spread must be > 0")
    if shape not in ("gaussian", "uniform-box"):
        raise ValueError(f"unknown cluster shape {shape!r}")
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("centers must be a (k, dim) array")
    rng = np.random.default_rng(seed)
    blocks = []
    for center in c:
        if shape == "gaussian":
            pts = center + rng.normal(0.0, spread, size=(n_per_cluster, c.shape[1]))
        else:
            pts = center + rng.uniform(-spread, spread, size=(n_per_cluster, c.shape[1]))
        blocks.append(pts)
    points = np.vstack(blocks)
    labels = np.repeat(np.arange(c.shape[0], dtype=np.int64), n_per_cluster)
    return Dataset(points, labels)


def save_csv(dataset: Dataset, path) -> None:
    """Write ``f0,...,f{n-1}[,y]`` with round-trip-exact decimal literals."""
    cols = [f"f{j}" for j in range(dataset.dim)]
    if dataset.has_labels:
        cols.append("y")
    int_labels = dataset.has_labels and dataset.labels.dtype.kind == "i"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(dataset.n_points):
            row = [repr(float(v)) for v in dataset.points[i]]
            if dataset.has_labels:
                lab = dataset.labels[i]
                row.append(str(int(lab)) if int_labels else repr(float(lab)))
            fh.write(",".join(row) + "\n")


_INT_LITERAL = re.compile(r"^[+-]?\d+$")


def load_csv(path) -> Dataset:
    """Parse a dataset written by :func:`save_csv`.

    Labels come back int64 when every label literal is an integer, float64
    otherwise; feature values are always float64. Raises :class:`ParseError`
    with a 1-based line number on any malformed content.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise ParseError("empty file", line=1)
        names = header.rstrip("\n").split(",")
        has_labels = bool(names) and names[-1] == "y"
        feat_names = names[:-1] if has_labels else names
        if not feat_names:
            raise ParseError("no feature columns in header", line=1)
        for j, name in enumerate(feat_names):
            m = _HEADER_FIELD.match(name)
            if not m or int(m.group(1)) != j:
                raise ParseError(f"bad header field {name!r} (expected f{j})", line=1)
        width = len(names)
        rows, raw_labels = [], []
        lineno = 1
        for raw in fh:
            lineno += 1
            parts = raw.rstrip("\n").split(",")
            if len(parts) != width:
                raise ParseError(
                    f"expected {width} fields, got {len(parts)}", line=lineno
                )
            try:
                rows.append([float(v) for v in parts[: len(feat_names)]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if has_labels:
                raw_labels.append(parts[-1])
        if not rows:
            raise ParseError("dataset has zero rows")
    points = np.asarray(rows, dtype=np.float64)
    if not has_labels:
        return Dataset(points)
    try:
        if all(_INT_LITERAL.match(v) for v in raw_labels):
            labels = np.asarray([int(v) for v in raw_labels], dtype=np.int64)
        else:
            labels = np.asarray([float(v) for v in raw_labels], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"bad label: {exc}") from None
    return Dataset(points, labels)


def partition(dataset: Dataset, spec: SplitSpec) -> Partition:
    """Split a dataset into ``spec.k`` shards.

    ``contiguous`` keeps source order with shard sizes differing by at most
    one; ``shuffled-iid`` permutes rows first (seeded); and
    ``by-label-heterogeneous`` deals whole label groups round-robin, which
    needs at least k distinct labels.
    """
    n = dataset.n_points
    if spec.k > n:
        raise ValueError(f"cannot split {n} rows into {spec.k} shards")
    if spec.mode == "contiguous":
        index_groups = np.array_split(np.arange(n, dtype=np.int64), spec.k)
    elif spec.mode == "shuffled-iid":
        perm = np.random.default_rng(spec.seed).permutation(n).astype(np.int64)
        index_groups = np.array_split(perm, spec.k)
    else:
        if not dataset.has_labels:
            raise ValueError("by-label-heterogeneous split requires labels")
        values = np.unique(dataset.labels)
        if len(values) < spec.k:
            raise ValueError(
                f"by-label-heterogeneous needs >= {spec.k} label groups, "
                f"found {len(values)}"
            )
        buckets = [[] for _ in range(spec.k)]
        for g, value in enumerate(values):
            buckets[g % spec.k].append(np.flatnonzero(dataset.labels == value))
        index_groups = [np.concatenate(b).astype(np.int64) for b in buckets]
    shards = []
    for idx in index_groups:
        labels = dataset.labels[idx] if dataset.has_labels else None
        shards.append(Dataset(dataset.points[idx], labels))
    return Partition(tuple(shards), tuple(index_groups))
