"""Closed-form weighted rigid alignment (Kabsch/Umeyama without scale)."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError, ParameterError
from .transform import RigidTransform


def weighted_procrustes(src: np.ndarray, tgt: np.ndarray, weights: np.ndarray | None = None) -> RigidTransform:
    """Rigid transform minimising sum_i w_i ||R src_i + t - tgt_i||^2."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ParameterError(f"expected matching (n, 3) arrays, got {src.shape} and {tgt.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ParameterError("weights must be non-negative with a positive sum")
    w = w / w.sum()

    cs = w @ src
    ct = w @ tgt
    H = (src - cs).T @ ((tgt - ct) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 1e-300 or S[1] <= 1e-10 * S[0]:
        raise DegenerateGeometryError(f"cross-covariance rank < 2 (singular values {S})")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    return RigidTransform(R, ct - R @ cs)
