"""End-to-end registration, training losses and the training loop, plus
checkpoint files."""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, extract_pyramid
from .cloud import PointCloud, voxel_downsample
from .config import ModelConfig
from .encoder import HybridFeatures, encode
from .errors import StateError
from .losses import gt_patch_matches, overlap_circle_loss, patch_overlaps, point_matching_loss
from .matching import (
    SKELETAL, SUPERPOINT, CorrespondenceSet, build_compatibility, coarse_match, dense_match,
    hybrid_resample, local_to_global, patch_assignments, spectral_denoise,
)
from .metrics import inlier_ratio
from .params import AdamState, ParameterStore, adam_step
from .skeleton import Skeleton, extract_skeleton, skeleton_loss
from .tensor import Tensor
from .transform import RigidTransform


@dataclass
class TrainSample:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    overlap: float = 1.0
    scale: float = 1.0


@dataclass
class FeatureState:
    pyr_P: FeaturePyramid
    pyr_Q: FeaturePyramid
    skel_P: Skeleton
    skel_Q: Skeleton
    feats_P: HybridFeatures
    feats_Q: HybridFeatures


@dataclass
class RegistrationResult:
    transform: RigidTransform
    coarse: CorrespondenceSet  # superpoint correspondences
    skeletal: CorrespondenceSet  # skeletal set after spectral denoising
    dense: CorrespondenceSet
    skeletal_raw: CorrespondenceSet | None = None
    hybrid: CorrespondenceSet | None = None
    timing: dict[str, float] = field(default_factory=dict)
    state: FeatureState | None = None


def preprocess(cloud: PointCloud, cfg: ModelConfig) -> PointCloud:
    return voxel_downsample(cloud, cfg.voxel_size)


def extract_features(src: PointCloud, tgt: PointCloud, params: ParameterStore, cfg: ModelConfig,
                     timing: dict | None = None) -> FeatureState:
    timing = {} if timing is None else timing
    t0 = time.perf_counter()
    pyr_P = extract_pyramid(preprocess(src, cfg), params, cfg)
    pyr_Q = extract_pyramid(preprocess(tgt, cfg), params, cfg)
    t1 = time.perf_counter()
    skel_P = extract_skeleton(pyr_P.superpoints, pyr_P.superpoint_features, params, cfg)
    skel_Q = extract_skeleton(pyr_Q.superpoints, pyr_Q.superpoint_features, params, cfg)
    t2 = time.perf_counter()
    feats_P, feats_Q = encode(pyr_P, skel_P, pyr_Q, skel_Q, params, cfg)
    t3 = time.perf_counter()
    timing.update(backbone=1e3 * (t1 - t0), skeleton=1e3 * (t2 - t1), encoder=1e3 * (t3 - t2))
    return FeatureState(pyr_P, pyr_Q, skel_P, skel_Q, feats_P, feats_Q)


def coarse_sets(state: FeatureState, cfg: ModelConfig) -> tuple[CorrespondenceSet, CorrespondenceSet]:
    """Superpoint and raw skeletal correspondences, both with coordinates."""
    sup = coarse_match(state.feats_P.H, state.feats_Q.H, cfg.n_coarse, SUPERPOINT, cfg.dual_norm)
    sup = sup.with_points(state.pyr_P.superpoints, state.pyr_Q.superpoints)
    skel = coarse_match(state.feats_P.H_s, state.feats_Q.H_s, cfg.n_coarse, SKELETAL, cfg.dual_norm)
    skel = skel.with_points(state.skel_P.points.data, state.skel_Q.points.data)
    return sup, skel


def denoise_skeletal(skel: CorrespondenceSet, cfg: ModelConfig) -> CorrespondenceSet:
    if len(skel) < 2:
        return skel
    M = build_compatibility(skel, sigma_c=cfg.sigma_c)
    return spectral_denoise(skel, M, cfg.min_cluster, cfg.tau_conflict, cfg.denoise_rule)


def register(src: PointCloud, tgt: PointCloud, params: ParameterStore, cfg: ModelConfig,
             keep_state: bool = False) -> RegistrationResult:
    timing: dict[str, float] = {}
    state = extract_features(src, tgt, params, cfg, timing)
    t0 = time.perf_counter()
    sup, skel_raw = coarse_sets(state, cfg)
    skel = denoise_skeletal(skel_raw, cfg)
    hybrid = hybrid_resample(sup, skel, cfg.n_replace, cfg.n_topk_skeletal)
    t1 = time.perf_counter()
    dense = dense_match(state.pyr_P, state.pyr_Q, hybrid, cfg, params)
    t2 = time.perf_counter()
    transform = local_to_global(dense, hybrid, cfg=cfg)
    t3 = time.perf_counter()
    timing.update(coarse=1e3 * (t1 - t0), dense=1e3 * (t2 - t1), lgr=1e3 * (t3 - t2))
    return RegistrationResult(transform, sup, skel, dense, skel_raw, hybrid, timing, state if keep_state else None)


# ------------------------------------------------------------------ training


@dataclass
class LossBreakdown:
    total: Tensor
    circle: float
    point: float
    skeleton: float
    coarse_ir: float
    registration: Tensor | None = None
    skeleton_t: Tensor | None = None


def sample_losses(sample: TrainSample, params: ParameterStore, cfg: ModelConfig,
                  rng: np.random.Generator, sphere_seed: int) -> LossBreakdown:
    state = extract_features(sample.source, sample.target, params, cfg)
    pP, pQ = state.pyr_P, state.pyr_Q
    O = patch_overlaps(pP.dense_points, pP.patches, pQ.dense_points, pQ.patches, sample.gt, cfg.tau_a)
    l_oc = overlap_circle_loss(state.feats_P.H, state.feats_Q.H, O, cfg)

    cand = np.argwhere(O > 0)
    if len(cand):
        pick = np.sort(rng.choice(len(cand), size=min(cfg.pm_num_pairs, len(cand)), replace=False))
        rows, cols = cand[pick, 0], cand[pick, 1]
        batch = patch_assignments(pP, pQ, rows, cols, params, cfg)
        labels = gt_patch_matches(pP.dense_points, batch.src_index, pQ.dense_points, batch.tgt_index,
                                  sample.gt, cfg.tau_a)
        l_p = point_matching_loss(batch.log_assignment, labels)
    else:
        l_p = Tensor(np.array(0.0))

    ls_P, _ = skeleton_loss(pP.superpoints, state.skel_P, cfg, seed=sphere_seed)
    ls_Q, _ = skeleton_loss(pQ.superpoints, state.skel_Q, cfg, seed=sphere_seed + 1)
    l_skel = T.add(ls_P, ls_Q)
    l_reg = T.add(l_oc, l_p)

    sup = coarse_match(state.feats_P.H, state.feats_Q.H, cfg.n_coarse, SUPERPOINT, cfg.dual_norm)
    sup = sup.with_points(pP.superpoints, pQ.superpoints)
    ir = inlier_ratio(sup, sample.gt, cfg.coarse_inlier_radius)
    return LossBreakdown(T.add(l_reg, l_skel), l_oc.item(), l_p.item(), l_skel.item(), ir, l_reg, l_skel)


def sample_seed(cfg: ModelConfig, epoch: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([cfg.seed, epoch, index]))


class TrainingError(RuntimeError):
    """Too many samples of an epoch produced non-finite losses."""


def train_epoch(dataset: list[TrainSample], params: ParameterStore, adam: AdamState, cfg: ModelConfig,
                epoch: int = 0, register_loss: bool = True, skeleton_loss_on: bool = True) -> dict[str, float]:
    """One pass with batch size 1; returns mean losses and mean coarse IR."""
    if not dataset:
        raise StateError("empty training set")
    sums = dict(loss=0.0, circle=0.0, point=0.0, skeleton=0.0, coarse_ir=0.0)
    used = skipped = 0
    for i, sample in enumerate(dataset):
        rng = sample_seed(cfg, epoch, i)
        parts = sample_losses(sample, params, cfg, rng, sphere_seed=int(rng.integers(2**31)))
        use_reg, use_skel = register_loss, skeleton_loss_on
        if cfg.optimize_mode == "alternate":
            step_parity = (adam.step % 2) == 0
            use_reg, use_skel = use_reg and step_parity, use_skel and not step_parity
        terms = [t for t, on in ((parts.registration, use_reg), (parts.skeleton_t, use_skel)) if on]
        objective = terms[0] if len(terms) == 1 else T.add(*terms) if terms else None
        params.zero_grad()
        if objective is None or not np.isfinite(parts.total.item()):
            skipped += not np.isfinite(parts.total.item())
            continue
        T.backward(objective)
        adam_step(params, adam)
        used += 1
        sums["loss"] += parts.total.item()
        sums["circle"] += parts.circle
        sums["point"] += parts.point
        sums["skeleton"] += parts.skeleton
        sums["coarse_ir"] += parts.coarse_ir
    if skipped * 2 > len(dataset):
        raise TrainingError(f"{skipped} of {len(dataset)} samples had non-finite losses")
    out = {k: v / max(used, 1) for k, v in sums.items()}
    out["skipped"] = float(skipped)
    return out


def train(dataset: list[TrainSample], cfg: ModelConfig, epochs: int | None = None, params: ParameterStore | None = None,
          log=None) -> tuple[ParameterStore, AdamState, list[dict[str, float]]]:
    params = params or ParameterStore(cfg.seed)
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs if epochs is None else epochs):
        stats = train_epoch(dataset, params, adam, cfg, epoch)
        history.append(stats)
        if log is not None:
            log(epoch, stats)
    return params, adam, history


# ------------------------------------------------------------------ checkpoints

_META_MAGIC = b"SPMD"


@dataclass
class CheckpointMeta:
    epoch: int
    config_digest: bytes
    rng_state: tuple[int, int, int, int]
    config_text: str


def pcg64_words(bitgen: np.random.PCG64) -> tuple[int, int, int, int]:
    st = bitgen.state["state"]
    m = (1 << 64) - 1
    s, inc = st["state"], st["inc"]
    return (s >> 64) & m, s & m, (inc >> 64) & m, inc & m


def pcg64_from_words(words) -> np.random.PCG64:
    bg = np.random.PCG64()
    st = bg.state
    st["state"] = {"state": (words[0] << 64) | words[1], "inc": (words[2] << 64) | words[3]}
    st["has_uint32"], st["uinteger"] = 0, 0
    bg.state = st
    return bg


def save_checkpoint(path: str | Path, params: ParameterStore, cfg: ModelConfig, epoch: int) -> None:
    """SPWT parameter block followed by: magic, u32 epoch, 32-byte config
    digest, 4 x u64 PRNG words, u32 length + UTF-8 config text."""
    text = cfg.to_text().encode("utf-8")
    meta = _META_MAGIC + struct.pack("<I", epoch) + cfg.digest()
    meta += struct.pack("<4Q", *pcg64_words(params.rng.bit_generator))
    meta += struct.pack("<I", len(text)) + text
    Path(path).write_bytes(params.to_bytes() + meta)


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, ModelConfig, CheckpointMeta]:
    import io

    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    params = ParameterStore.read(fh)
    rest = raw[fh.tell():]
    if rest[:4] != _META_MAGIC:
        raise ValueError(f"{path}: missing checkpoint metadata block")
    epoch = struct.unpack_from("<I", rest, 4)[0]
    digest = rest[8:40]
    words = struct.unpack_from("<4Q", rest, 40)
    n = struct.unpack_from("<I", rest, 72)[0]
    text = rest[76:76 + n].decode("utf-8")
    # the digest covers the stored text, so checkpoints written before a
    # config field existed still load, with that field at its default
    if hashlib.sha256(rest[76:76 + n]).digest() != digest:
        raise ValueError(f"{path}: config digest mismatch")
    cfg = ModelConfig.from_text(text)
    params.seed = cfg.seed
    params.rng = np.random.Generator(pcg64_from_words(words))
    return params, cfg, CheckpointMeta(epoch, digest, tuple(words), text)
