"""Skeleton-aware geometric transformer.

Token sequence per cloud is [superpoints; skeleton points]. Self-attention
scores carry a point-wise structure embedding (pair distances and neighbour
angles) and a skeleton-aware structure embedding (distances/angles to the k
nearest skeleton points). Cross-attention adds the skeleton-aware positional
encoding produced by the preceding self-attention layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ParameterError
from .layers import layer_norm, linear, mlp2
from .params import ParameterStore
from .tensor import Tensor

ANGLE_EPS = 1e-12


def sinusoidal_embed(x, d: int) -> np.ndarray:
    """Entry 2i = sin(x / 10000^(2i/d)), entry 2i+1 = cos(same)."""
    if d % 2:
        raise ParameterError(f"embedding width must be even, got {d}")
    x = np.asarray(x, dtype=np.float64)
    div = 10000.0 ** (np.arange(d // 2) * 2.0 / d)
    arg = x[..., None] / div
    out = np.empty(x.shape + (d,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def angle_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unsigned angle in radians; 0 when either vector is (near) zero."""
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = (u * v).sum(-1)
    ang = np.arctan2(cross, dot)
    degenerate = (np.linalg.norm(u, axis=-1) < ANGLE_EPS) | (np.linalg.norm(v, axis=-1) < ANGLE_EPS)
    return np.where(degenerate, 0.0, ang)


def _knn_excluding_self(pos: np.ndarray, k: int) -> np.ndarray:
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    k = min(k, len(pos) - 1)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


# ------------------------------------------------------------------ geometry


@dataclass
class PointStructureInputs:
    distance: np.ndarray  # (L, L, d) sinusoid of ||p_i - p_j|| / sigma_d
    angular: np.ndarray  # (L, L, k, d) sinusoid of neighbour angles / sigma_a


@dataclass
class SkeletonStructureInputs:
    rho: np.ndarray  # (L,) sum of distances to the k nearest skeleton points
    angles: np.ndarray  # (L, L, k) theta^x_{i,j}, radians
    distance: np.ndarray  # (L, L, d)
    angular_mean: np.ndarray  # (L, L, d) mean_x of the angular sinusoids


def point_structure_inputs(positions: np.ndarray, cfg: ModelConfig) -> PointStructureInputs:
    pos = np.asarray(positions, dtype=np.float64)
    d = cfg.d_t
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    nbr = _knn_excluding_self(pos, cfg.knn_angle)
    ref = pos[nbr] - pos[:, None, :]  # (L, k, 3) anchored at i
    anc = pos[None, :, :] - pos[:, None, :]  # (L, L, 3): p_j - p_i
    theta = angle_between(ref[:, None, :, :], anc[:, :, None, :])  # (L, L, k)
    return PointStructureInputs(
        sinusoidal_embed(dist / cfg.sigma_d, d),
        sinusoidal_embed(np.degrees(theta) / cfg.sigma_a, d),
    )


def skeleton_structure_inputs(positions: np.ndarray, skeleton_points: np.ndarray, cfg: ModelConfig) -> SkeletonStructureInputs:
    pos = np.asarray(positions, dtype=np.float64)
    skel = np.asarray(skeleton_points, dtype=np.float64)
    k = cfg.knn_skeleton
    if len(skel) < k:
        raise ParameterError(f"need at least k={k} skeleton points, got {len(skel)}")
    d2 = ((pos[:, None, :] - skel[None, :, :]) ** 2).sum(-1)
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]  # (L, k)
    rel = skel[nbr] - pos[:, None, :]  # (L, k, 3): s^j_x - p_j
    rho = np.sqrt((rel**2).sum(-1)).sum(-1)
    # theta[i, j, x] = angle(s^j_x - p_j, p_i - p_j)
    other = pos[:, None, :] - pos[None, :, :]  # [i, j] = p_i - p_j
    theta = angle_between(rel[None, :, :, :], other[:, :, None, :])
    d = cfg.d_t
    dist_emb = sinusoidal_embed((rho[:, None] - rho[None, :]) / cfg.sigma_d_s, d)
    ang = np.zeros(theta.shape[:2] + (d,))
    for x in range(theta.shape[2]):
        ang += sinusoidal_embed(np.degrees(theta[:, :, x]) / cfg.sigma_a_s, d)
    ang /= theta.shape[2]
    return SkeletonStructureInputs(rho, theta, dist_emb, ang)


def compute_point_structure_embedding(positions: np.ndarray, cfg: ModelConfig, params: ParameterStore,
                                      inputs: PointStructureInputs | None = None) -> Tensor:
    """r_p = dist_emb W_D + max_x(angular_emb_x W_A)."""
    inp = inputs or point_structure_inputs(positions, cfg)
    d = cfg.d_t
    W_D = params.get_or_create("encoder/point_embed/W_D", (d, d))
    W_A = params.get_or_create("encoder/point_embed/W_A", (d, d))
    r = T.matmul(Tensor(inp.distance), W_D)
    if inp.angular.shape[2] == 0:
        return r
    return T.add(r, T.max(T.matmul(Tensor(inp.angular), W_A), axis=2))


def compute_skeleton_structure_embedding(positions: np.ndarray, skeleton_points: np.ndarray, cfg: ModelConfig,
                                         params: ParameterStore, inputs: SkeletonStructureInputs | None = None):
    """r_s = d^s W_D + mean_x(a^s_x W_A); returns (r_s, rho)."""
    inp = inputs or skeleton_structure_inputs(positions, skeleton_points, cfg)
    d = cfg.d_t
    W_D = params.get_or_create("encoder/skeleton_embed/W_D", (d, d))
    W_A = params.get_or_create("encoder/skeleton_embed/W_A", (d, d))
    # mean_x(a_x W_A) == mean_x(a_x) W_A
    r = T.add(T.matmul(Tensor(inp.distance), W_D), T.matmul(Tensor(inp.angular_mean), W_A))
    return r, inp.rho


# ------------------------------------------------------------------ attention


def _split_heads(x: Tensor, heads: int) -> Tensor:
    return T.reshape(x, x.shape[:-1] + (heads, x.shape[-1] // heads))


def _merge_heads(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _feed_forward(params: ParameterStore, path: str, x: Tensor, d: int) -> Tensor:
    y = mlp2(params, f"{path}/ffn", x, d, 2 * d, d, final_relu=False)
    return layer_norm(params, f"{path}/norm2", T.add(x, y), d)


def self_attention_layer(x: Tensor, r_p: Tensor, r_s: Tensor, params: ParameterStore, cfg: ModelConfig,
                         path: str = "encoder/self0", return_aux: bool = False):
    """Returns (output, E') or (output, E', aux) with aux = {scores, attention, z}."""
    d, h = cfg.d_t, cfg.heads
    dh = d // h
    L = x.shape[0]
    q = linear(params, f"{path}/W_Q", x, d, d, bias=False)
    k = linear(params, f"{path}/W_K", x, d, d, bias=False)
    v = linear(params, f"{path}/W_V", x, d, d, bias=False)
    W_P = params.get_or_create(f"{path}/W_P/weight", (d, d))
    W_S = params.get_or_create(f"{path}/W_S/weight", (d, d))
    pos = T.add(T.matmul(r_p, W_P), T.matmul(r_s, W_S))  # (L, L, d)
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    posh = T.reshape(pos, (L, L, h, dh))
    scores = T.add(T.einsum("ihc,jhc->hij", qh, kh), T.einsum("ihc,ijhc->hij", qh, posh))
    scores = T.scale(scores, 1.0 / np.sqrt(dh))
    attn = T.row_softmax(scores)  # (h, L, L)
    z = _merge_heads(T.einsum("hij,jhc->ihc", attn, vh))
    e_prime = _merge_heads(T.einsum("hij,ijhc->ihc", attn, T.reshape(r_s, (L, L, h, dh))))
    x1 = layer_norm(params, f"{path}/norm1", T.add(x, z), d)
    out = _feed_forward(params, path, x1, d)
    if return_aux:
        return out, e_prime, {"scores": scores, "attention": attn, "z": z}
    return out, e_prime


def _attend(params, path, x_a, xp_a, xp_b, cfg, aux=None):
    d, h = cfg.d_t, cfg.heads
    dh = d // h
    q = _split_heads(linear(params, f"{path}/W_Q", xp_a, d, d, bias=False), h)
    k = _split_heads(linear(params, f"{path}/W_K", xp_b, d, d, bias=False), h)
    v = _split_heads(linear(params, f"{path}/W_V", xp_b, d, d, bias=False), h)
    scores = T.scale(T.einsum("ihc,jhc->hij", q, k), 1.0 / np.sqrt(dh))
    attn = T.row_softmax(scores)
    z = _merge_heads(T.einsum("hij,jhc->ihc", attn, v))
    if aux is not None:
        aux.update(scores=scores, attention=attn, z=z)
    x1 = layer_norm(params, f"{path}/norm1", T.add(x_a, z), d)
    return _feed_forward(params, path, x1, d)


def cross_attention_layer(x_P: Tensor, e_P: Tensor, x_Q: Tensor, e_Q: Tensor, params: ParameterStore,
                          cfg: ModelConfig, path: str = "encoder/cross0", n_keys_P: int | None = None,
                          n_keys_Q: int | None = None, return_aux: bool = False):
    """Both directions share weights. ``n_keys_*`` restricts the keys/values
    of that cloud to its first rows (superpoint-only ablation)."""
    xp_P = T.add(x_P, e_P)
    xp_Q = T.add(x_Q, e_Q)
    keys_Q = xp_Q if n_keys_Q is None else T.gather_rows(xp_Q, np.arange(n_keys_Q))
    keys_P = xp_P if n_keys_P is None else T.gather_rows(xp_P, np.arange(n_keys_P))
    aux_P, aux_Q = ({}, {}) if return_aux else (None, None)
    out_P = _attend(params, path, x_P, xp_P, keys_Q, cfg, aux_P)
    out_Q = _attend(params, path, x_Q, xp_Q, keys_P, cfg, aux_Q)
    if return_aux:
        return out_P, out_Q, (aux_P, aux_Q)
    return out_P, out_Q


# ------------------------------------------------------------------ encoder


@dataclass
class HybridFeatures:
    H: Tensor  # superpoint features
    H_s: Tensor  # skeletal features


@dataclass
class CloudGeometry:
    positions: np.ndarray
    r_p: Tensor
    r_s: Tensor
    n_super: int


def cloud_geometry(superpoints: np.ndarray, skeleton_points: np.ndarray, params: ParameterStore, cfg: ModelConfig) -> CloudGeometry:
    pos = np.concatenate([superpoints, skeleton_points], axis=0)
    r_p = compute_point_structure_embedding(pos, cfg, params)
    r_s, _ = compute_skeleton_structure_embedding(pos, skeleton_points, cfg, params)
    return CloudGeometry(pos, r_p, r_s, len(superpoints))


def encode_tokens(x_P: Tensor, geo_P: CloudGeometry, x_Q: Tensor, geo_Q: CloudGeometry,
                  params: ParameterStore, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    restrict = cfg.cross_keys == "superpoints"
    for t in range(cfg.n_interleave):
        x_P, e_P = self_attention_layer(x_P, geo_P.r_p, geo_P.r_s, params, cfg, f"encoder/self{t}")
        x_Q, e_Q = self_attention_layer(x_Q, geo_Q.r_p, geo_Q.r_s, params, cfg, f"encoder/self{t}")
        x_P, x_Q = cross_attention_layer(
            x_P, e_P, x_Q, e_Q, params, cfg, f"encoder/cross{t}",
            n_keys_P=geo_P.n_super if restrict else None,
            n_keys_Q=geo_Q.n_super if restrict else None,
        )
    return x_P, x_Q


def encode(pyr_P, skel_P, pyr_Q, skel_Q, params: ParameterStore, cfg: ModelConfig) -> tuple[HybridFeatures, HybridFeatures]:
    geo_P = cloud_geometry(pyr_P.superpoints, skel_P.points.data, params, cfg)
    geo_Q = cloud_geometry(pyr_Q.superpoints, skel_Q.points.data, params, cfg)
    x_P = T.concat_rows([pyr_P.superpoint_features, skel_P.features])
    x_Q = T.concat_rows([pyr_Q.superpoint_features, skel_Q.features])
    x_P, x_Q = encode_tokens(x_P, geo_P, x_Q, geo_Q, params, cfg)
    nP, nQ = geo_P.n_super, geo_Q.n_super
    LP, LQ = x_P.shape[0], x_Q.shape[0]
    return (
        HybridFeatures(T.gather_rows(x_P, np.arange(nP)), T.gather_rows(x_P, np.arange(nP, LP))),
        HybridFeatures(T.gather_rows(x_Q, np.arange(nQ)), T.gather_rows(x_Q, np.arange(nQ, LQ))),
    )
