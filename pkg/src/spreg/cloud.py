"""Point cloud container, voxel downsampling, exact kNN search and ICP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError, StateError
from .procrustes import weighted_procrustes
from .transform import RigidTransform


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    attributes: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.attributes is not None:
            attr = np.asarray(self.attributes, dtype=np.float64).reshape(-1)
            if len(attr) != len(pts):
                raise ParameterError(f"{len(attr)} attributes for {len(pts)} points")
            object.__setattr__(self, "attributes", attr)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> PointCloud:
        attr = None if self.attributes is None else self.attributes[index]
        return PointCloud(self.points[index], attr)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.attributes)


# ------------------------------------------------------------------ voxels

_MASK21 = (1 << 21) - 1


def _spread21(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(_MASK21)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_key(keys: np.ndarray) -> np.ndarray:
    """63-bit Morton code of integer voxel keys (low 21 bits of each axis)."""
    k = keys + (1 << 20)
    return _spread21(k[:, 0]) | (_spread21(k[:, 1]) << np.uint64(1)) | (_spread21(k[:, 2]) << np.uint64(2))


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by Morton code then voxel key."""
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    codes = morton_key(keys)
    # Morton codes can collide once keys leave the 21-bit range; the
    # secondary sort on the full key keeps equal voxels contiguous.
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], codes))
    sk = keys[order]
    starts = np.flatnonzero(np.r_[True, np.any(sk[1:] != sk[:-1], axis=1)])
    counts = np.diff(np.r_[starts, len(sk)])
    pts = np.add.reduceat(cloud.points[order], starts, axis=0) / counts[:, None]
    attr = None
    if cloud.attributes is not None:
        attr = np.add.reduceat(cloud.attributes[order], starts) / counts
    return PointCloud(pts, attr)


# ------------------------------------------------------------------ kNN


def _distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points - query
    return np.sqrt((diff * diff).sum(axis=-1))


class SpatialIndex:
    """Exact nearest-neighbour queries; ties go to the lower point index.

    Candidate retrieval uses a balanced kd-tree (median split, leaf size 16);
    final distances and ordering are recomputed here so the result matches a
    brute-force scan exactly.
    """

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points = pts
        self._tree = cKDTree(pts, leafsize=16, balanced_tree=True) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def _require(self):
        if self._tree is None:
            raise StateError("spatial index is empty")

    def knn(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        idx, dist = self.knn_many(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return idx[0], dist[0]

    def knn_many(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(m, k') index and distance arrays, k' = min(k, len(index))."""
        self._require()
        if k < 1:
            raise ParameterError("k must be >= 1")
        Q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        kk = min(k, n)
        if len(Q) == 0:
            return np.zeros((0, kk), dtype=np.int64), np.zeros((0, kk))
        fetch = min(n, kk + 1)
        _, cand = self._tree.query(Q, k=fetch)
        cand = cand.reshape(len(Q), fetch)
        dist = _distances(self.points[cand], Q[:, None, :])
        order = np.lexsort((cand, dist), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)
        idx_out = cand[:, :kk].copy()
        dist_out = dist[:, :kk].copy()
        if fetch > kk:
            # a near-tie at the boundary may hide a lower-index point
            edge = dist[:, kk - 1]
            risky = np.flatnonzero(dist[:, kk] <= edge * (1 + 1e-9) + 1e-12)
            for r in risky:
                ball = np.asarray(self._tree.query_ball_point(Q[r], edge[r] * (1 + 1e-9) + 1e-12), dtype=np.int64)
                ball = np.union1d(ball, cand[r])
                d = _distances(self.points[ball], Q[r])
                o = np.lexsort((ball, d))[:kk]
                idx_out[r] = ball[o]
                dist_out[r] = d[o]
        return idx_out, dist_out

    def radius_neighbors(self, query, radius: float) -> np.ndarray:
        """Indices within ``radius`` (inclusive), ascending by (distance, index)."""
        self._require()
        q = np.asarray(query, dtype=np.float64).reshape(3)
        ball = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-15), dtype=np.int64)
        if len(ball) == 0:
            return ball
        d = _distances(self.points[ball], q)
        keep = d <= radius
        ball, d = ball[keep], d[keep]
        return ball[np.lexsort((ball, d))]

    def within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Boolean mask: does each query have any indexed point within ``radius``."""
        if self._tree is None:
            return np.zeros(len(queries), dtype=bool)
        _, d = self.knn_many(queries, 1)
        return d[:, 0] < radius


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    idx, dist = index.knn(query, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


# ------------------------------------------------------------------ ICP


@dataclass
class ICPResult:
    transform: RigidTransform
    residuals: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    no_progress: bool = False


def icp_refine(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    max_iters: int = 50,
    max_corr_dist: float = 1.0,
    rel_tol: float = 1e-6,
) -> ICPResult:
    """Point-to-point ICP. An update is kept only if the mean closest-point
    residual does not increase."""
    if len(source) == 0 or len(target) == 0:
        raise ParameterError("ICP needs non-empty clouds")
    index = SpatialIndex(target)
    src = source.points

    def residual(T):
        idx, d = index.knn_many(T.apply(src), 1)
        mask = d[:, 0] < max_corr_dist
        return idx[:, 0], d[:, 0], mask

    T = init
    idx, d, mask = residual(T)
    if mask.sum() < 3:
        return ICPResult(init, [], 0, False, True)
    result = ICPResult(T, [float(d[mask].mean())])
    for it in range(max_iters):
        try:
            T_new = weighted_procrustes(src[mask], target.points[idx[mask]])
        except ValueError:
            break
        idx_n, d_n, mask_n = residual(T_new)
        if mask_n.sum() < 3:
            break
        r_new = float(d_n[mask_n].mean())
        r_old = result.residuals[-1]
        if r_new > r_old:
            break
        T, idx, d, mask = T_new, idx_n, d_n, mask_n
        result.transform = T
        result.residuals.append(r_new)
        result.iterations = it + 1
        if r_old == 0.0 or (r_old - r_new) / r_old < rel_tol:
            result.converged = True
            break
    return result
