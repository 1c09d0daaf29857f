"""Spatial cell graphs: KD-tree index, k-nearest-neighbour edges, A + A^2."""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DEFAULT_K = 5
DEFAULT_RADIUS = 100.0


@dataclass(frozen=True)
class EdgeList:
    """Undirected edges as an (E, 2) int array with u < v, sorted lexicographically."""

    pairs: np.ndarray
    n: int
    # derived directed forms, computed once per instance (the instance is immutable)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)
        if len(pairs):
            if np.any(pairs[:, 0] >= pairs[:, 1]):
                raise ValueError("edges must satisfy u < v (no self-loops)")
            if pairs.min() < 0 or pairs.max() >= self.n:
                bad = pairs[(pairs < 0).any(1) | (pairs >= self.n).any(1)][0]
                raise ValueError(f"edge {tuple(int(x) for x in bad)} has endpoint outside [0, {self.n})")
            if len(np.unique(pairs, axis=0)) != len(pairs):
                raise ValueError("duplicate edges")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_pairs(cls, pairs, n: int) -> "EdgeList":
        """Normalize arbitrary (u, v) pairs: orient u < v, drop loops and duplicates."""
        p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        p = np.sort(p, axis=1)
        p = p[p[:, 0] != p[:, 1]]
        p = np.unique(p, axis=0) if len(p) else p
        return cls(p, n)

    def directed(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations as (src, dst), sorted by (dst, src)."""
        if "directed" not in self._cache:
            src = np.concatenate([self.pairs[:, 0], self.pairs[:, 1]])
            dst = np.concatenate([self.pairs[:, 1], self.pairs[:, 0]])
            order = np.lexsort((src, dst))
            self._cache["directed"] = (src[order].astype(np.intp), dst[order].astype(np.intp))
        return self._cache["directed"]

    def two_hop(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) of A + A^2 without self-loops, sorted by (dst, src)."""
        if "two_hop" not in self._cache:
            self._cache["two_hop"] = two_hop_directed(self)
        return self._cache["two_hop"]

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.pairs}


# ---------------------------------------------------------------- KD-tree

@dataclass
class _Node:
    lo: int
    hi: int
    axis: int = -1
    split: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None


class KdTree:
    """Balanced 2-d tree with median splits on alternating axes.

    Leaves hold at most ``leaf_size`` point indices.  Queries are exact:
    k-NN results equal a brute-force scan ordered by (squared distance, id).
    """

    def __init__(self, points, ids=None, leaf_size: int = 8):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise ValueError("KdTree needs at least one 2-d point")
        self.points = pts
        self.ids = np.arange(len(pts)) if ids is None else np.asarray(ids)
        if len(self.ids) != len(pts):
            raise ValueError("ids and points differ in length")
        self.leaf_size = max(1, int(leaf_size))
        self.index = np.arange(len(pts))
        self.depth = 0
        self.root = self._build(0, len(pts), 0)

    def _build(self, lo: int, hi: int, depth: int) -> _Node:
        self.depth = max(self.depth, depth)
        if hi - lo <= self.leaf_size:
            return _Node(lo, hi)
        axis = depth % 2
        mid = (lo + hi) // 2
        seg = self.index[lo:hi]
        part = np.argpartition(self.points[seg, axis], mid - lo)
        self.index[lo:hi] = seg[part]
        split = self.points[self.index[mid], axis]
        node = _Node(lo, hi, axis, split)
        node.left = self._build(lo, mid, depth + 1)
        node.right = self._build(mid, hi, depth + 1)
        return node

    def leaves(self) -> list[np.ndarray]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.left is None:
                out.append(self.index[node.lo:node.hi].copy())
            else:
                stack += [node.right, node.left]
        return out

    def query_knn(self, xy, k: int, radius: float = np.inf, exclude: int | None = None):
        """Indices of the k nearest points within ``radius`` (inclusive).

        Ordered by (squared distance, id).  ``exclude`` drops one point index,
        typically the query point itself.
        """
        qx, qy = float(xy[0]), float(xy[1])
        r2 = radius * radius
        heap: list[tuple[float, int, int]] = []  # max-heap on (d2, id) via negation
        pts, ids = self.points, self.ids

        def worse_than_all(d2: float) -> bool:
            return len(heap) == k and d2 > -heap[0][0]

        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.left is None:
                for i in self.index[node.lo:node.hi]:
                    if i == exclude:
                        continue
                    dx = pts[i, 0] - qx
                    dy = pts[i, 1] - qy
                    d2 = dx * dx + dy * dy
                    if d2 > r2:
                        continue
                    key = (-d2, -ids[i], int(i))
                    if len(heap) < k:
                        heapq.heappush(heap, key)
                    elif (d2, ids[i]) < (-heap[0][0], -heap[0][1]):
                        heapq.heapreplace(heap, key)
                continue
            diff = (qx if node.axis == 0 else qy) - node.split
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            plane2 = diff * diff
            if plane2 <= r2 and not worse_than_all(plane2):
                stack.append(far)
            stack.append(near)
        heap.sort(key=lambda e: (-e[0], -e[1]))
        return [e[2] for e in heap]

    def query_radius(self, xy, radius: float) -> list[int]:
        """All point indices within ``radius`` (inclusive), ascending."""
        qx, qy = float(xy[0]), float(xy[1])
        r2 = radius * radius
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.left is None:
                sel = self.index[node.lo:node.hi]
                d = self.points[sel] - (qx, qy)
                d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
                out.extend(sel[d2 <= r2].tolist())
                continue
            diff = (qx if node.axis == 0 else qy) - node.split
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            if diff * diff <= r2:
                stack.append(far)
            stack.append(near)
        return sorted(out)


def build_kdtree(points, ids=None, leaf_size: int = 8) -> KdTree:
    return KdTree(points, ids=ids, leaf_size=leaf_size)


def knn_graph(points, k: int = DEFAULT_K, radius: float = DEFAULT_RADIUS, ids=None) -> EdgeList:
    """Connect each point to its ``k`` nearest neighbours within ``radius``.

    Selections are symmetrized by union.  Distance ties at the k-th neighbour
    go to the lower id (``ids`` defaults to positions).  Edges index positions.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        return EdgeList(np.zeros((0, 2), dtype=np.int64), n)
    tree = KdTree(pts, ids=ids)
    pairs = [(i, j) for i in range(n) for j in tree.query_knn(pts[i], k, radius, exclude=i)]
    return EdgeList.from_pairs(pairs, n)


def adjacency_powers(edges: EdgeList, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Boolean A and the two-hop union A + A^2, both with a zero diagonal."""
    n = edges.n if n is None else n
    a = _adjacency_sparse(edges, n)
    a2 = ((a + a @ a) > 0).tolil()
    a2.setdiag(False)
    return a.toarray().astype(bool), a2.toarray().astype(bool)


def two_hop_directed(edges: EdgeList) -> tuple[np.ndarray, np.ndarray]:
    """(src, dst) pairs of A + A^2 sorted by (dst, src); the GNN's neighbour lists.

    A join on the middle node over the sorted directed edges: every edge
    u -> v is extended by each neighbour w of v.
    """
    n = edges.n
    src, dst = edges.directed()
    deg = np.bincount(dst, minlength=n)
    ptr = np.r_[0, np.cumsum(deg)]
    reps = deg[dst]
    total = int(reps.sum())
    # index of the w-th neighbour of v for every (edge, w) combination
    first = np.repeat(ptr[dst] - np.r_[0, np.cumsum(reps)[:-1]], reps) + np.arange(total)
    u, w = np.repeat(src, reps), src[first]
    keys = np.concatenate([dst.astype(np.int64) * n + src, w.astype(np.int64) * n + u])
    keys = np.unique(keys[keys // n != keys % n])
    return (keys % n).astype(np.intp), (keys // n).astype(np.intp)


def _adjacency_sparse(edges: EdgeList, n: int):
    u, v = edges.pairs[:, 0], edges.pairs[:, 1]
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    return sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n, n))


def read_centroids(path) -> tuple[np.ndarray, np.ndarray]:
    """Load an ``id,x,y`` CSV; returns (ids, points)."""
    ids, pts = [], []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:3]] != ["id", "x", "y"]:
            raise ValueError(f"{path}: expected header id,x,y")
        for row in reader:
            ids.append(int(row["id"]))
            pts.append((float(row["x"]), float(row["y"])))
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate nucleus ids")
    return np.asarray(ids, dtype=np.int64), np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def write_centroids(path, ids, points) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in zip(ids, np.asarray(points)):
            w.writerow([int(i), repr(float(x)), repr(float(y))])
