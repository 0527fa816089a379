"""Hierarchical point feature extractor: voxel pyramid, PointNet-style local
aggregation per level, additive top-down fusion to the dense level."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cloud import PointCloud, SpatialIndex, voxel_downsample
from .config import ModelConfig
from .errors import DegenerateInputError
from .layers import linear, mlp2
from .params import ParameterStore
from .tensor import Tensor

MIN_SUPERPOINTS = 4


@dataclass
class Patches:
    assignment: np.ndarray  # (n_dense,) owning superpoint of every dense point
    index: np.ndarray  # (n_super, n_patch) dense indices, nearest first, -1 padded
    mask: np.ndarray  # (n_super, n_patch) bool

    def members(self, superpoint: int) -> np.ndarray:
        return self.index[superpoint][self.mask[superpoint]]


@dataclass
class FeaturePyramid:
    points: list[np.ndarray]
    features: list[Tensor | None]
    superpoint_level: int
    dense_level: int
    patches: Patches | None = None

    @property
    def superpoints(self) -> np.ndarray:
        return self.points[self.superpoint_level]

    @property
    def superpoint_features(self) -> Tensor:
        return self.features[self.superpoint_level]

    @property
    def dense_points(self) -> np.ndarray:
        return self.points[self.dense_level]

    @property
    def dense_features(self) -> Tensor:
        return self.features[self.dense_level]


def build_levels(cloud: PointCloud, cfg: ModelConfig) -> list[np.ndarray]:
    levels = []
    current = cloud
    for v in cfg.level_voxels:
        current = voxel_downsample(current, v)
        levels.append(current.points)
    if len(levels[-1]) < MIN_SUPERPOINTS:
        raise DegenerateInputError(f"only {len(levels[-1])} superpoints; need at least {MIN_SUPERPOINTS}")
    return levels


def relative_descriptor(rel: np.ndarray, scale: float, frame: str) -> np.ndarray:
    """Per-neighbour geometric input for ``rel`` of shape (n, k, 3).

    "yaw" keeps (horizontal distance, dz, distance) and is invariant to
    rotations about the vertical axis. "lrf" is invariant too but keeps the
    azimuth: offsets are expressed in a per-centre frame whose x axis points
    at the horizontal centroid of the neighbourhood.
    """
    rel = rel / scale
    if frame == "global":
        return rel
    if frame == "lrf":
        m = rel[..., :2].mean(axis=-2, keepdims=True)
        norm = np.sqrt((m**2).sum(-1, keepdims=True))
        e1 = np.where(norm > 1e-9, m / np.maximum(norm, 1e-9), np.array([1.0, 0.0]))
        x = rel[..., 0] * e1[..., 0] + rel[..., 1] * e1[..., 1]
        y = rel[..., 1] * e1[..., 0] - rel[..., 0] * e1[..., 1]
        return np.stack([x, y, rel[..., 2]], axis=-1)
    horiz = np.sqrt(rel[..., 0] ** 2 + rel[..., 1] ** 2)
    full = np.sqrt(horiz**2 + rel[..., 2] ** 2)
    return np.stack([horiz, rel[..., 2], full], axis=-1)


def _aggregate(params, path, centers, support, support_feat, d_feat, width, k, scale, frame):
    """max_j MLP([desc(p_j - c_i) || f_j]) over the k nearest support points."""
    index = SpatialIndex(support)
    nbr, _ = index.knn_many(centers, k)
    kk = nbr.shape[1]
    desc = relative_descriptor(support[nbr] - centers[:, None, :], scale, frame)
    geo = Tensor(desc.reshape(-1, 3))
    if support_feat is None:
        x = geo
        d_in = 3
    else:
        x = T.concat([geo, T.gather_rows(support_feat, nbr.reshape(-1))], axis=1)
        d_in = 3 + d_feat
    h = mlp2(params, path, x, d_in, width, width)
    return instance_norm(T.max(T.reshape(h, (len(centers), kk, width)), axis=1))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every channel over the points of one cloud."""
    centered = T.sub(x, T.mean(x, axis=0, keepdims=True))
    var = T.mean(T.square(centered), axis=0, keepdims=True)
    return T.mul(centered, T.reciprocal(T.sqrt(T.add(var, eps))))


def extract_pyramid(cloud: PointCloud, params: ParameterStore, cfg: ModelConfig) -> FeaturePyramid:
    levels = build_levels(cloud, cfg)
    voxels = cfg.level_voxels
    top = cfg.num_levels - 1

    encoded: list[Tensor] = []
    prev_feat, prev_w = None, 0
    for lvl, pts in enumerate(levels):
        support = pts if lvl == 0 else levels[lvl - 1]
        h = _aggregate(
            params, f"backbone/enc{lvl}", pts, support, prev_feat, prev_w,
            cfg.level_widths[lvl], cfg.backbone_k, voxels[lvl], cfg.rel_frame,
        )
        encoded.append(h)
        prev_feat, prev_w = h, cfg.level_widths[lvl]

    features: list[Tensor | None] = [None] * cfg.num_levels
    features[top] = linear(params, "backbone/out_super", encoded[top], cfg.level_widths[top], cfg.d_t)
    upper, upper_w = features[top], cfg.d_t
    for lvl in range(top - 1, cfg.dense_level - 1, -1):
        parent, _ = SpatialIndex(levels[lvl + 1]).knn_many(levels[lvl], 1)
        lateral = linear(params, f"backbone/lat{lvl}", encoded[lvl], cfg.level_widths[lvl], cfg.d_dense)
        topdown = linear(params, f"backbone/up{lvl}", T.gather_rows(upper, parent[:, 0]), upper_w, cfg.d_dense, bias=False)
        fused = T.add(lateral, topdown)
        if lvl == cfg.dense_level:
            fused = linear(params, "backbone/out_dense", T.relu(fused), cfg.d_dense, cfg.d_dense)
        else:
            fused = T.relu(fused)
        features[lvl] = fused
        upper, upper_w = fused, cfg.d_dense

    pyr = FeaturePyramid(levels, features, top, cfg.dense_level)
    pyr.patches = assign_patches(pyr, cfg.n_patch)
    return pyr


def assign_patches(pyramid: FeaturePyramid, n_patch: int) -> Patches:
    """Nearest-superpoint partition of the dense points, each patch truncated
    to its ``n_patch`` points closest to the superpoint."""
    sup = pyramid.superpoints
    dense = pyramid.dense_points
    owner, dist = SpatialIndex(sup).knn_many(dense, 1)
    owner, dist = owner[:, 0], dist[:, 0]
    order = np.lexsort((np.arange(len(dense)), dist, owner))
    index = np.full((len(sup), n_patch), -1, dtype=np.int64)
    starts = np.searchsorted(owner[order], np.arange(len(sup)))
    ends = np.searchsorted(owner[order], np.arange(len(sup)), side="right")
    for s, (a, b) in enumerate(zip(starts, ends)):
        members = order[a : min(b, a + n_patch)]
        index[s, : len(members)] = members
    return Patches(owner, index, index >= 0)
