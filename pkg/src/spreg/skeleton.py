"""Skeleton extraction: skeleton points as learned convex combinations of the
superpoints, skeletal features, medial radii, and the unsupervised skeleton
loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DegenerateInputError
from .layers import linear
from .params import ParameterStore
from .tensor import Tensor

MIN_SUPERPOINTS = 4


@dataclass
class Skeleton:
    points: Tensor  # (N_s, 3)
    radii: Tensor  # (N_s, 1)
    features: Tensor  # (N_s, d_t)
    weights: Tensor  # (n_super, N_s), columns sum to 1
    logits: Tensor | None = None


def skeleton_logits(features: Tensor, params: ParameterStore, cfg: ModelConfig) -> Tensor:
    # input detached: the skeleton branch must not push gradients into the backbone
    x = T.detach(features)
    h = T.relu(linear(params, "skeleton/fc1", x, cfg.d_t, cfg.d_t))
    return linear(params, "skeleton/fc2", h, cfg.d_t, cfg.n_skeleton)


def skeleton_from_weights(superpoints: np.ndarray, features: Tensor, weights: Tensor) -> Skeleton:
    Wt = T.transpose(weights)
    points = T.matmul(Wt, Tensor(superpoints))
    feats = T.matmul(Wt, features)
    radii = compute_radii(superpoints, points, weights)
    return Skeleton(points, radii, feats, weights)


def extract_skeleton(superpoints, features: Tensor, params: ParameterStore, cfg: ModelConfig) -> Skeleton:
    sp = getattr(superpoints, "points", superpoints)
    sp = np.asarray(sp, dtype=np.float64)
    if len(sp) < MIN_SUPERPOINTS:
        raise DegenerateInputError(f"skeleton extraction needs >= {MIN_SUPERPOINTS} superpoints, got {len(sp)}")
    logits = skeleton_logits(features, params, cfg)
    skel = skeleton_from_weights(sp, features, T.col_softmax(logits))
    skel.logits = logits
    return skel


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``b`` for every row of ``a`` (ties -> lower)."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def _row_dist(a: Tensor, b: Tensor) -> Tensor:
    return T.sqrt(T.sum(T.square(T.sub(a, b)), axis=1))


def compute_radii(superpoints: np.ndarray, skeleton_points: Tensor, weights: Tensor) -> Tensor:
    """radii = W^T D with D_i the distance from superpoint i to its nearest
    skeleton point."""
    sp = Tensor(superpoints)
    nn = _nearest(superpoints, skeleton_points.data)
    D = _row_dist(sp, T.gather_rows(skeleton_points, nn))
    return T.matmul(T.transpose(weights), T.reshape(D, (-1, 1)))


def sphere_directions(n_spheres: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.normal(size=(n_spheres, m, 3))
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def skeleton_loss(superpoints, skel: Skeleton, cfg: ModelConfig, seed: int | None = None) -> tuple[Tensor, dict[str, float]]:
    """L_s + lambda1 * L_p2s + lambda2 * L_r.

    L_s: symmetric Chamfer distance (mean Euclidean, both directions) between
    the superpoints and ``sphere_samples`` points drawn on every medial sphere.
    L_p2s: point-to-sphere residuals | ||p - c|| - r |, nearest sphere per
    superpoint plus nearest superpoint per sphere, summed.
    L_r: negative mean radius, favouring large inscribed spheres.
    """
    sp_np = np.asarray(getattr(superpoints, "points", superpoints), dtype=np.float64)
    sp = Tensor(sp_np)
    ns = skel.points.shape[0]
    m = cfg.sphere_samples
    dirs = sphere_directions(ns, m, cfg.seed if seed is None else seed)

    centers = T.gather_rows(skel.points, np.repeat(np.arange(ns), m))
    radii_rep = T.gather_rows(skel.radii, np.repeat(np.arange(ns), m))
    samples = T.add(centers, T.mul(radii_rep, Tensor(dirs.reshape(-1, 3))))

    s_np = samples.data
    nn_ps = _nearest(sp_np, s_np)
    nn_sp = _nearest(s_np, sp_np)
    loss_s = T.add(
        T.mean(_row_dist(sp, T.gather_rows(samples, nn_ps))),
        T.mean(_row_dist(samples, T.gather_rows(sp, nn_sp))),
    )

    c_np = skel.points.data
    r_np = skel.radii.data[:, 0]
    resid = np.abs(np.sqrt(((sp_np[:, None, :] - c_np[None, :, :]) ** 2).sum(-1)) - r_np[None, :])
    best_sphere = np.argmin(resid, axis=1)
    best_point = np.argmin(resid, axis=0)

    def p2s(pt: Tensor, c: Tensor, r: Tensor) -> Tensor:
        return T.absolute(T.sub(_row_dist(pt, c), T.reshape(r, (-1,))))

    loss_p2s = T.add(
        T.sum(p2s(sp, T.gather_rows(skel.points, best_sphere), T.gather_rows(skel.radii, best_sphere))),
        T.sum(p2s(T.gather_rows(sp, best_point), skel.points, skel.radii)),
    )
    loss_r = T.scale(T.mean(skel.radii), -1.0)
    total = T.add(T.add(loss_s, T.scale(loss_p2s, cfg.lambda1)), T.scale(loss_r, cfg.lambda2))
    parts = {"sampling": loss_s.item(), "point_to_sphere": loss_p2s.item(), "radius": loss_r.item()}
    return total, parts
