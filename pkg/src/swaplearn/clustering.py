"""Clustering by movable boxes and by centroids.

k-windows clusters with axis-aligned boxes under a weighted l-inf norm: a
point is inside a window iff max_d w_d |x_d - c_d| < r (strictly). Phase 1
moves windows to the mean of what they capture; phase 2 enlarges them one
dimension at a time while the capture holds up; phase 3 merges windows whose
captures overlap enough. The distributed variant runs phases 1-2 per shard
and merges every geometrically overlapping pair of transmitted windows.

k-means is the usual Lloyd iteration, under squared l2 (mean update) or
l-inf (per-dimension midrange update).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, Partition

UNASSIGNED = -1

KMEANS_NORMS = ("l2", "linf")


def _frozen(a, dtype=np.float64):
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


def weighted_linf_dist(x, c, w) -> float:
    """max_d w_d |x_d - c_d|; zero iff x == c."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (x.shape == c.shape == w.shape):
        raise ValueError("x, c, w must share a shape")
    if not np.all(w > 0):
        raise ValueError("weights must be > 0")
    return float(np.max(w * np.abs(x - c)))


@dataclass(frozen=True)
class Window:
    """An axis-aligned box: membership is max_d w_d |x_d - c_d| < r.

    Weights start at 1 and only shrink (dividing by 1+e widens the box along
    that dimension, since the half-extent along d is r / w_d). ``frozen``
    marks a window that captured nothing in phase 1 and is left in place.
    """

    center: np.ndarray
    base_radius: float
    weights: np.ndarray
    cardinality: int = 0
    frozen: bool = False

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if c.ndim != 1 or w.shape != c.shape:
            raise ValueError("center and weights must be 1-D and aligned")
        if not (self.base_radius > 0 and np.isfinite(self.base_radius)):
            raise ValueError("base_radius must be > 0")
        if not (np.all(w > 0) and np.isfinite(w).all() and np.isfinite(c).all()):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def half_extents(self) -> np.ndarray:
        return self.base_radius / self.weights

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Strict membership mask over rows of ``points``."""
        d = np.max(self.weights * np.abs(points - self.center), axis=1)
        return d < self.base_radius

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.max(self.weights * np.abs(points - self.center), axis=1)


@dataclass(frozen=True)
class KWindowsConfig:
    k_init: int
    radius: float
    enlarge_step: float = 0.1
    enlarge_threshold: float = 0.8
    center_tol: float = 1e-3
    merge_overlap_ratio: float = 0.2
    max_iters: int = 50

    def __post_init__(self):
        if self.k_init < 1:
            raise ValueError("k_init must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not self.enlarge_step > 0:
            raise ValueError("enlarge_step must be > 0")
        if not 0 < self.enlarge_threshold <= 1:
            raise ValueError("enlarge_threshold must be in (0, 1]")
        if not 0 < self.merge_overlap_ratio <= 1:
            raise ValueError("merge_overlap_ratio must be in (0, 1]")
        if not self.center_tol > 0:
            raise ValueError("center_tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class ClusterModel:
    """Output of any clustering run.

    ``assignment[i]`` is a cluster/window id or UNASSIGNED. k-means fills
    ``centers``; k-windows fills ``windows`` and ``memberships`` (per-window
    captured indices; a point can appear in several). ``history`` records the
    per-iteration k-means objective.
    """

    assignment: np.ndarray
    objective: float
    centers: np.ndarray | None = None
    windows: tuple[Window, ...] | None = None
    memberships: tuple[np.ndarray, ...] | None = None
    history: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "assignment", _frozen(self.assignment, np.int64))


class RangeTree:
    """k-d tree with bucket leaves for exact open-box range queries."""

    class _Node:
        __slots__ = ("lo", "hi", "left", "right", "indices")

        def __init__(self, lo, hi, left=None, right=None, indices=None):
            self.lo, self.hi = lo, hi
            self.left, self.right = left, right
            self.indices = indices

    def __init__(self, points: np.ndarray, leaf_size: int = 16):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a nonempty 2-D array")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.points = _frozen(pts)
        self.leaf_size = leaf_size
        self._root = self._build(np.arange(pts.shape[0], dtype=np.int64))

    def _build(self, idx):
        sub = self.points[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        if idx.size <= self.leaf_size:
            return self._Node(lo, hi, indices=np.sort(idx))
        dim = int(np.argmax(hi - lo))
        order = idx[np.argsort(sub[:, dim], kind="stable")]
        mid = idx.size // 2
        return self._Node(lo, hi, self._build(order[:mid]), self._build(order[mid:]))

    def query(self, window: Window) -> np.ndarray:
        """Indices of all points strictly inside the window, ascending."""
        if window.dim != self.points.shape[1]:
            raise ValueError("window dimension does not match the tree")
        c, h, r, w = window.center, window.half_extents, window.base_radius, window.weights
        out = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            if np.any(node.lo >= c + h) or np.any(node.hi <= c - h):
                continue  # no point of this box can be strictly inside
            corner = np.maximum(np.abs(node.lo - c), np.abs(node.hi - c))
            if np.all(w * corner < r):
                self._collect(node, out)  # whole box strictly inside
                continue
            if node.indices is not None:
                pts = self.points[node.indices]
                out.append(node.indices[window.contains(pts)])
            else:
                stack.append(node.left)
                stack.append(node.right)
        if not out:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(out))

    @staticmethod
    def _collect(node, out):
        stack = [node]
        while stack:
            n = stack.pop()
            if n.indices is not None:
                out.append(n.indices)
            else:
                stack.append(n.left)
                stack.append(n.right)


def range_query(tree: RangeTree, window: Window) -> np.ndarray:
    return tree.query(window)


def _pairwise(points, centers, norm):
    diff = points[:, None, :] - centers[None, :, :]
    if norm == "l2":
        return np.einsum("ijk,ijk->ij", diff, diff)  # squared
    return np.max(np.abs(diff), axis=2)


def kmeans(dataset: Dataset, n_clusters: int, norm: str = "l2",
           init: str = "seeded-random-points", seed: int = 0,
           centers: np.ndarray | None = None, max_iters: int = 100) -> ClusterModel:
    """Lloyd iteration until the assignment is stable.

    Ties go to the lowest center index. A cluster that loses all points is
    reseeded at the point farthest from its nearest center. Under l2 the
    update is the mean and the objective (sum of squared distances) never
    increases; under l-inf the update is the per-dimension midrange and the
    objective is the plain distance sum.
    """
    if norm not in KMEANS_NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    points = dataset.points
    n = dataset.n_points
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= n_clusters <= {n}")
    if init == "provided":
        if centers is None:
            raise ValueError("init='provided' requires centers")
        centers = np.array(centers, dtype=np.float64)
        if centers.shape != (n_clusters, dataset.dim):
            raise ValueError("centers must have shape (n_clusters, dim)")
    elif init == "seeded-random-points":
        rng = np.random.default_rng(seed)
        centers = points[rng.choice(n, size=n_clusters, replace=False)].copy()
    else:
        raise ValueError(f"unknown init {init!r}")

    prev = None
    history = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        for _ in range(n_clusters):  # reseed loop; at most k repairs
            d = _pairwise(points, centers, norm)
            assign = np.argmin(d, axis=1)
            empty = np.flatnonzero(np.bincount(assign, minlength=n_clusters) == 0)
            if empty.size == 0:
                break
            farthest = int(np.argmax(d.min(axis=1)))
            centers[empty[0]] = points[farthest]
        history.append(float(d[np.arange(n), assign].sum()))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        for j in range(n_clusters):
            members = points[assign == j]
            if members.size == 0:
                continue
            if norm == "l2":
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = 0.5 * (members.min(axis=0) + members.max(axis=0))
    return ClusterModel(assign, history[-1], centers=_frozen(centers),
                        history=tuple(history))


def _window_assignment(points, windows):
    """Nearest containing window per point (its own weighted norm), else -1."""
    n = points.shape[0]
    best = np.full(n, UNASSIGNED, dtype=np.int64)
    best_d = np.full(n, np.inf)
    for j, w in enumerate(windows):
        d = w.distances(points)
        better = (d < w.base_radius) & (d < best_d)
        best[better] = j
        best_d[better] = d[better]
    return best


def _window_objective(points, windows, memberships):
    # Phase-1 loss: every captured copy of a point counts.
    total = 0.0
    for w, idx in zip(windows, memberships):
        if idx.size:
            diff = points[idx] - w.center
            total += float(np.einsum("ij,ij->", diff, diff))
    return total


def _window_model(points, windows, memberships):
    return ClusterModel(_window_assignment(points, windows),
                        _window_objective(points, windows, memberships),
                        windows=tuple(windows), memberships=tuple(memberships))


def seed_window_centers(dataset: Dataset, k: int, seed=0) -> np.ndarray:
    """k distinct data points, drawn without replacement."""
    if not 1 <= k <= dataset.n_points:
        raise ValueError(f"need 1 <= k <= {dataset.n_points}")
    rng = np.random.default_rng(seed)
    return dataset.points[rng.choice(dataset.n_points, size=k, replace=False)].copy()


def kwindows_phase1(dataset: Dataset, config: KWindowsConfig,
                    init_centers: np.ndarray) -> ClusterModel:
    """Capture-and-recenter until every window's center moves < center_tol.

    Windows that capture nothing are frozen in place and flagged. Points may
    be captured by several windows (all memberships recorded) or none.
    """
    init_centers = np.asarray(init_centers, dtype=np.float64)
    if init_centers.shape != (config.k_init, dataset.dim):
        raise ValueError("init_centers must have shape (k_init, dim)")
    points = dataset.points
    tree = RangeTree(points)
    ones = np.ones(dataset.dim)
    windows = [Window(c, config.radius, ones) for c in init_centers]
    for _ in range(config.max_iters):
        moved = 0.0
        nxt = []
        for w in windows:
            if w.frozen:
                nxt.append(w)
                continue
            idx = tree.query(w)
            if idx.size == 0:
                nxt.append(replace(w, cardinality=0, frozen=True))
                continue
            center = points[idx].mean(axis=0)
            moved = max(moved, float(np.max(np.abs(center - w.center))))
            nxt.append(Window(center, w.base_radius, w.weights, idx.size))
        windows = nxt
        if moved < config.center_tol:
            break
    memberships = [tree.query(w) if not w.frozen else np.empty(0, np.int64)
                   for w in windows]
    return _window_model(points, windows, memberships)


def _dim_cap(extent: float, config: KWindowsConfig) -> int:
    # Accepted steps along one dimension are capped by how far the captured
    # data actually extends: ceil(log_{1+e}(extent / r)), never negative.
    if extent <= config.radius:
        return 0
    return int(np.ceil(np.log(extent / config.radius)
                       / np.log1p(config.enlarge_step)))


def kwindows_enlarge(model: ClusterModel, dataset: Dataset,
                     config: KWindowsConfig) -> ClusterModel:
    """Grow each window one dimension at a time while the capture holds up.

    One attempt along d: divide w_d by (1+e), recapture, recenter to the
    capture mean, recapture again. Accept when the new/old cardinality ratio
    is >= enlarge_threshold, otherwise revert and stop enlarging d. Accepted
    steps along d are capped at ceil(log_{1+e}(capture extent_d / r)),
    recomputed as the capture grows, so a window tracks its own cluster's
    spread instead of marching through empty space; the capture extent never
    exceeds the data extent, which bounds the step count and guarantees
    termination.
    """
    points = dataset.points
    tree = RangeTree(points)
    new_windows, memberships = [], []
    for w, captured in zip(model.windows, model.memberships):
        if w.frozen or captured.size == 0:
            new_windows.append(w)
            memberships.append(np.empty(0, np.int64))
            continue
        center, weights = w.center.copy(), w.weights.copy()
        capture = captured
        counts = np.zeros(dataset.dim, dtype=np.int64)
        active = set(range(dataset.dim))
        while active:
            for d in sorted(active):
                spans = points[capture][:, d]
                if counts[d] >= _dim_cap(float(spans.max() - spans.min()), config):
                    active.discard(d)
                    continue
                trial_w = weights.copy()
                trial_w[d] /= 1.0 + config.enlarge_step
                grown = tree.query(Window(center, config.radius, trial_w))
                trial_c = points[grown].mean(axis=0)
                settled = tree.query(Window(trial_c, config.radius, trial_w))
                if settled.size / capture.size >= config.enlarge_threshold:
                    center, weights, capture = trial_c, trial_w, settled
                    counts[d] += 1
                else:
                    active.discard(d)
        new_windows.append(Window(center, config.radius, weights, capture.size))
        memberships.append(capture)
    return _window_model(points, new_windows, memberships)


def _max_half_extent(w: Window) -> float:
    return float(np.max(w.half_extents))


def _merge_pair(a: Window, b: Window) -> Window:
    """Tightest box centered at the cardinality-weighted mean that covers both."""
    total = a.cardinality + b.cardinality
    center = (a.cardinality * a.center + b.cardinality * b.center) / total
    half = np.maximum(np.abs(center - a.center) + a.half_extents,
                      np.abs(center - b.center) + b.half_extents)
    return Window(center, a.base_radius, a.base_radius / half, total)


def kwindows_merge(model: ClusterModel, dataset: Dataset,
                   config: KWindowsConfig) -> ClusterModel:
    """Fuse windows whose captures overlap by at least merge_overlap_ratio.

    Candidate pairs have centers within twice the larger of the two windows'
    biggest half-extents (l-inf); the overlap ratio is |both| / min
    cardinality. Merging repeats until no pair qualifies. Windows that
    captured nothing are dropped: they carry no cluster evidence. Final
    assignment sends each point to the nearest containing window, or
    UNASSIGNED.
    """
    points = dataset.points
    tree = RangeTree(points)
    kept = [(w, set(idx.tolist()))
            for w, idx in zip(model.windows, model.memberships)
            if w.cardinality > 0 and idx.size > 0]
    windows = [w for w, _ in kept]
    captures = [c for _, c in kept]
    merged = True
    while merged:
        merged = False
        for i in range(len(windows)):
            for j in range(i + 1, len(windows)):
                a, b = windows[i], windows[j]
                gap = float(np.max(np.abs(a.center - b.center)))
                if gap >= 2.0 * max(_max_half_extent(a), _max_half_extent(b)):
                    continue
                overlap = len(captures[i] & captures[j])
                if overlap / min(a.cardinality, b.cardinality) < config.merge_overlap_ratio:
                    continue
                fused = _merge_pair(a, b)
                idx = tree.query(fused)
                fused = replace(fused, cardinality=idx.size)
                windows[i] = fused
                captures[i] = set(idx.tolist())
                del windows[j], captures[j]
                merged = True
                break
            if merged:
                break
    memberships = [np.array(sorted(c), dtype=np.int64) for c in captures]
    return _window_model(points, windows, memberships)


def kwindows(dataset: Dataset, config: KWindowsConfig, seed=0,
             init_centers: np.ndarray | None = None) -> ClusterModel:
    """Full pipeline: phase-1 capture, phase-2 enlargement, phase-3 merge."""
    if init_centers is None:
        init_centers = seed_window_centers(dataset, config.k_init, seed)
    model = kwindows_phase1(dataset, config, init_centers)
    model = kwindows_enlarge(model, dataset, config)
    return kwindows_merge(model, dataset, config)


@dataclass(frozen=True)
class WindowSummary:
    """What one node sends upward: geometry and a count, never points."""

    node_id: int
    center: np.ndarray
    weights: np.ndarray
    radius: float
    cardinality: int

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center))
        object.__setattr__(self, "weights", _frozen(self.weights))


def _boxes_overlap(a: Window, b: Window) -> bool:
    return bool(np.all(np.abs(a.center - b.center) < a.half_extents + b.half_extents))


def distributed_kwindows(partition: Partition, config: KWindowsConfig, seed=0,
                         channel: list | None = None) -> ClusterModel:
    """Phases 1-2 on each shard, then merge every overlapping pair centrally.

    Only :class:`WindowSummary` messages cross the node/server boundary
    (2*dim + 2 reals per window); the server merges geometrically overlapping
    pairs unconditionally, summing cardinalities, because it has no points to
    recount. The returned assignment and objective are evaluated over the
    pooled shard rows (in partition order), which in a deployment each node
    would do locally.
    """
    windows: list[Window] = []
    for node_id, shard in enumerate(partition.shards):
        init = seed_window_centers(shard, config.k_init, seed=[seed, node_id])
        local = kwindows_enlarge(kwindows_phase1(shard, config, init), shard, config)
        for w in local.windows:
            if w.cardinality == 0:
                continue
            msg = WindowSummary(node_id, w.center, w.weights, w.base_radius,
                                w.cardinality)
            if channel is not None:
                channel.append(msg)
            windows.append(Window(msg.center, msg.radius, msg.weights,
                                  msg.cardinality))
    merged = True
    while merged:
        merged = False
        for i in range(len(windows)):
            for j in range(i + 1, len(windows)):
                if _boxes_overlap(windows[i], windows[j]):
                    windows[i] = _merge_pair(windows[i], windows[j])
                    del windows[j]
                    merged = True
                    break
            if merged:
                break
    pooled = np.vstack([s.points for s in partition.shards])
    memberships = [np.flatnonzero(w.contains(pooled)).astype(np.int64)
                   for w in windows]
    windows = [replace(w, cardinality=m.size) for w, m in zip(windows, memberships)]
    return _window_model(pooled, windows, memberships)
