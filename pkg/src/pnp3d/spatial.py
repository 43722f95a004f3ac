"""Neighbourhood search over 3D coordinates and local graph construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .numerics import Var, _emit, const, tally


class ParameterError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    attrs: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise IntegrityError(f"coords must be [N, 3], got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise IntegrityError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise IntegrityError("point coordinates must be finite")
        if self.attrs is not None:
            self.attrs = np.asarray(self.attrs, dtype=np.float64)
            if self.attrs.shape[0] != self.coords.shape[0]:
                raise IntegrityError("attrs and coords disagree on the number of points")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class NeighborIndex:
    indices: np.ndarray
    k: int
    mode: str = "knn"
    radius: float | None = None

    def check(self, n: int) -> None:
        if self.indices.ndim != 2 or self.indices.shape != (n, self.k):
            raise IntegrityError(f"neighbour table shape {self.indices.shape} does not fit N={n}, k={self.k}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise IntegrityError(f"neighbour index out of range [0, {n})")


def _coords(cloud) -> np.ndarray:
    return cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _sq_dists(block: np.ndarray, pts: np.ndarray) -> np.ndarray:
    d = np.zeros((block.shape[0], pts.shape[0]))
    for axis in range(3):
        diff = block[:, axis, None] - pts[None, :, axis]
        d += diff * diff
    return d


def _nearest(d: np.ndarray, take: int) -> np.ndarray:
    """Column indices of the ``take`` smallest entries per row, by (distance, index)."""
    if take >= d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, take - 1, axis=1)[:, :take]
    pd = np.take_along_axis(d, part, axis=1)
    sel = np.take_along_axis(part, np.lexsort((part, pd), axis=-1), axis=1)
    # argpartition picks arbitrarily among ties at the cut; redo those rows exactly
    tied = np.flatnonzero((d <= pd.max(axis=1, keepdims=True)).sum(axis=1) > take)
    for r in tied:
        sel[r] = np.argsort(d[r], kind="stable")[:take]
    return sel


def _ordered_rows(pts: np.ndarray, take: int, chunk: int = 512):
    """Yield (row offset, squared distances, nearest ``take`` columns), self excluded.

    The query's own distance is set to +inf so it can only appear last.
    """
    n = pts.shape[0]
    for start in range(0, n, chunk):
        d = _sq_dists(pts[start:start + chunk], pts)
        rows = np.arange(d.shape[0])
        d[rows, start + rows] = np.inf
        yield start, d, _nearest(d, take)


def knn_search(cloud, k: int, method: str = "brute") -> NeighborIndex:
    """k nearest other points per point; short rows are padded with the query itself."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    pts = _coords(cloud)
    n = pts.shape[0]
    if method == "kdtree":
        return _knn_kdtree(pts, k)
    if method != "brute":
        raise ParameterError(f"unknown search method {method!r}")
    out = np.empty((n, k), dtype=np.int64)
    take = min(k, n - 1)
    if take == 0:
        return NeighborIndex(np.zeros((n, k), dtype=np.int64), k, "knn")
    for start, _, order in _ordered_rows(pts, take):
        rows = order.shape[0]
        out[start:start + rows, :take] = order
        out[start:start + rows, take:] = np.arange(start, start + rows)[:, None]
    return NeighborIndex(out, k, "knn")


def _knn_kdtree(pts: np.ndarray, k: int) -> NeighborIndex:
    """k-d tree candidates re-ranked exactly, so ties resolve as in brute force."""
    from scipy.spatial import cKDTree

    n = pts.shape[0]
    out = np.repeat(np.arange(n)[:, None], k, axis=1)
    take = min(k, n - 1)
    if take == 0:
        return NeighborIndex(out, k, "knn")
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=take + 1)
    bound = dist[:, -1] * (1 + 1e-9) + 1e-12
    for i, cand in enumerate(tree.query_ball_point(pts, bound)):
        cand = np.array([j for j in cand if j != i], dtype=np.int64)
        cand.sort()
        diff = pts[cand] - pts[i]
        d = (diff * diff).sum(-1)
        out[i, :take] = cand[np.argsort(d, kind="stable")[:take]]
    return NeighborIndex(out, k, "knn")


def ball_query(cloud, radius: float, k: int) -> NeighborIndex:
    """Up to k other points within ``radius`` in ascending distance.

    Missing slots repeat the nearest qualifying neighbour, or the query point
    itself when nothing lies inside the ball.
    """
    if radius <= 0:
        raise ParameterError(f"radius must be > 0, got {radius}")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    pts = _coords(cloud)
    n = pts.shape[0]
    r2 = radius * radius
    out = np.empty((n, k), dtype=np.int64)
    m = min(k, n)
    for start, d, sel in _ordered_rows(pts, m):
        rows = sel.shape[0]
        inside = np.take_along_axis(d, sel, axis=1) <= r2
        first = np.where(inside[:, 0], sel[:, 0], np.arange(start, start + rows))
        block = np.repeat(first[:, None], k, axis=1)
        block[:, :m] = np.where(inside, sel, first[:, None])
        out[start:start + rows] = block
    return NeighborIndex(out, k, "ball", radius)


def find_neighbors(cloud, k: int, mode: str = "knn", radius: float | None = None) -> NeighborIndex:
    if mode == "knn":
        return knn_search(cloud, k)
    if mode == "ball":
        if radius is None:
            raise ParameterError("ball query needs a radius")
        return ball_query(cloud, radius, k)
    raise ParameterError(f"unknown neighbour mode {mode!r}")


def _gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """x[B, N, D], idx[B, N, k] -> [B, N, k, D]."""
    b = np.arange(x.shape[0])[:, None, None]
    return x[b, idx]


def edge_graph(x: Var, idx: np.ndarray) -> Var:
    """[x_i ; x_j - x_i] for every neighbour slot.

    ``x`` is [B, N, D] (or [N, D]); ``idx`` is the matching [B, N, k] table.
    """
    x = const(x)
    xv = x.value
    squeeze = xv.ndim == 2
    if squeeze:
        xv, idx = xv[None], np.asarray(idx)[None]
    bsz, n, dim = xv.shape
    if idx.shape[:2] != (bsz, n):
        raise IntegrityError(f"neighbour table {idx.shape} does not match features {xv.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IntegrityError(f"neighbour index out of range [0, {n})")
    k = idx.shape[2]
    out = np.empty((bsz, n, k, 2 * dim))
    centre = xv[:, :, None, :]
    out[..., :dim] = centre
    np.subtract(_gather(xv, idx), centre, out=out[..., dim:])
    tally(bsz * n * k * dim)
    if squeeze:
        out = out[0]

    def backward(g):
        g = g.reshape(bsz, n, k, 2 * dim)
        g_edge = np.ascontiguousarray(g[..., dim:]).reshape(-1, dim)
        dx = g[..., :dim].sum(axis=2).reshape(-1, dim)
        dx -= g_edge.reshape(bsz * n, k, dim).sum(axis=1)
        # scatter-add edge gradients onto the neighbours: rows = targets, one column per slot
        targets = (np.arange(bsz)[:, None, None] * n + idx).reshape(-1)
        scatter = sparse.csr_matrix((np.ones(targets.size), (targets, np.arange(targets.size))),
                                    shape=(bsz * n, targets.size))
        dx += scatter @ g_edge
        dx = dx.reshape(bsz, n, dim)
        return (dx[0] if squeeze else dx,)

    return _emit(out, (x,), backward)


def _table(idx) -> np.ndarray:
    return idx.indices if isinstance(idx, NeighborIndex) else np.asarray(idx)


def build_geometric_graph(cloud, idx) -> np.ndarray:
    """[N, k, 6] tensor of [p_i ; p_j - p_i]."""
    return edge_graph(Var(_coords(cloud)), _table(idx)).value


def build_feature_graph(features, idx) -> Var:
    """[N, k, 2C] graph of [f_i ; f_j - f_i]; differentiable in ``features``."""
    return edge_graph(const(features), _table(idx))
