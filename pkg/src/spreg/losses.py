"""Registration supervision: overlap-aware circle loss over superpoint
features and the point matching loss over Sinkhorn assignments."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor
from .transform import RigidTransform

_OFF = -1e4  # logit for excluded pairs; exp underflows to zero


def feature_distance(a: Tensor, b: Tensor) -> Tensor:
    """sqrt(2 - 2 cos) between L2-normalized rows."""
    an, bn = T.l2_normalize(a), T.l2_normalize(b)
    sim = T.matmul(an, T.transpose(bn))
    return T.sqrt(T.relu(T.add(T.scale(sim, -2.0), Tensor(np.array(2.0)))))


def _anchor_terms(logits: Tensor, anchors: np.ndarray) -> Tensor:
    """log(1 + sum_j exp(logits[i, j])) for the anchor rows."""
    rows = T.gather_rows(logits, np.flatnonzero(anchors))
    pad = Tensor(np.zeros((rows.shape[0], 1)))
    return T.logsumexp(T.concat([rows, pad], axis=1), axis=1)


def overlap_circle_loss(H_P: Tensor, H_Q: Tensor, patch_overlaps: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Per anchor: log(1 + sum_pos exp(beta*sqrt(o)*(d - dp)) + sum_neg exp(beta*(dn - d))).

    Anchors are patches with at least one positive (overlap above the
    floor); negatives are pairs with zero overlap. The row and column
    directions are averaged.
    """
    O = np.asarray(patch_overlaps, dtype=np.float64)
    pos = O > cfg.positive_overlap
    neg = O == 0.0
    row_anchor, col_anchor = pos.any(1), pos.any(0)
    if not row_anchor.any():
        return Tensor(np.array(0.0))
    beta = cfg.circle_scale
    lam = np.sqrt(np.where(pos, O, 0.0))
    coef = np.where(pos, beta * lam, np.where(neg, -beta, 0.0))
    const = np.where(pos, -beta * lam * cfg.circle_pos_margin, np.where(neg, beta * cfg.circle_neg_margin, _OFF))
    D = feature_distance(H_P, H_Q)
    logits = T.add(T.mul(D, Tensor(coef)), Tensor(const))
    row = T.mean(_anchor_terms(logits, row_anchor))
    col = T.mean(_anchor_terms(T.transpose(logits), col_anchor))
    return T.scale(T.add(row, col), 0.5)


def gt_patch_matches(src_pts: np.ndarray, src_index: np.ndarray, tgt_pts: np.ndarray, tgt_index: np.ndarray,
                     gt: RigidTransform, radius: float) -> np.ndarray:
    """(B, n+1, m+1) boolean label tensor: real entries whose GT-aligned
    distance is below ``radius``; unmatched valid rows/columns go to slack."""
    B, n = src_index.shape
    m = tgt_index.shape[1]
    mP, mQ = src_index >= 0, tgt_index >= 0
    p = gt.apply(src_pts[np.where(mP, src_index, 0)].reshape(-1, 3)).reshape(B, n, 3)
    q = tgt_pts[np.where(mQ, tgt_index, 0)]
    d = np.sqrt(((p[:, :, None, :] - q[:, None, :, :]) ** 2).sum(-1))
    real = (d < radius) & mP[:, :, None] & mQ[:, None, :]
    labels = np.zeros((B, n + 1, m + 1), dtype=bool)
    labels[:, :n, :m] = real
    labels[:, :n, m] = mP & ~real.any(2)
    labels[:, n, :m] = mQ & ~real.any(1)
    return labels


def point_matching_loss(log_assignment: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over patch pairs of the mean -log assignment at labelled cells."""
    lab = np.asarray(labels, dtype=bool)
    counts = lab.reshape(len(lab), -1).sum(1)
    keep = counts > 0
    if not keep.any():
        return Tensor(np.array(0.0))
    weights = np.where(lab, 1.0, 0.0) / np.maximum(counts, 1)[:, None, None]
    weights[~keep] = 0.0
    total = T.sum(T.mul(log_assignment, Tensor(weights)))
    return T.scale(total, -1.0 / keep.sum())


def patch_overlaps(src_dense: np.ndarray, src_patches, tgt_dense: np.ndarray, tgt_patches,
                   gt: RigidTransform, radius: float) -> np.ndarray:
    """Symmetric patch overlap: the mean over both directions of the fraction
    of a patch's points with a GT-aligned counterpart in the other patch."""
    n_src, n_tgt = src_patches.index.shape[0], tgt_patches.index.shape[0]
    src_owner = _owners(len(src_dense), src_patches)
    tgt_owner = _owners(len(tgt_dense), tgt_patches)
    aligned = gt.apply(src_dense)
    pairs = cKDTree(aligned).sparse_distance_matrix(cKDTree(tgt_dense), radius, output_type="ndarray")
    i, j, dist = pairs["i"], pairs["j"], pairs["v"]
    ok = (dist < radius) & (src_owner[i] >= 0) & (tgt_owner[j] >= 0)
    i, j = i[ok], j[ok]

    def fraction(pts, other_owner, own_owner, n_own, n_other, sizes):
        hits = np.unique(pts[0] * n_other + other_owner[pts[1]])
        pt, other = np.divmod(hits, n_other)
        counts = np.zeros((n_own, n_other))
        np.add.at(counts, (own_owner[pt], other), 1.0)
        return counts / np.maximum(sizes, 1)[:, None]

    sizes_src = src_patches.mask.sum(1)
    sizes_tgt = tgt_patches.mask.sum(1)
    f_src = fraction((i, j), tgt_owner, src_owner, n_src, n_tgt, sizes_src)
    f_tgt = fraction((j, i), src_owner, tgt_owner, n_tgt, n_src, sizes_tgt)
    return 0.5 * (f_src + f_tgt.T)


def _owners(n_points: int, patches) -> np.ndarray:
    """Patch of every dense point, -1 for points cut by patch truncation."""
    owner = np.full(n_points, -1, dtype=np.int64)
    rows, cols = np.nonzero(patches.mask)
    owner[patches.index[rows, cols]] = rows
    return owner
