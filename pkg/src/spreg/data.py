"""Procedural outdoor scenes, the synthetic cross-source pair generator,
overlap ratios, and the tab-separated pair manifest."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, SpatialIndex, voxel_downsample
from .config import ModelConfig
from .errors import DegenerateInputError, ParameterError
from .io import read_cloud, write_kitti_bin
from .pipeline import TrainSample
from .transform import RigidTransform

MIN_BASE_POINTS = 5000
MAX_CROP_ATTEMPTS = 20


# ------------------------------------------------------------------ scenes


def _box_surface(rng, center, size, yaw, spacing):
    """Walls and roof of an axis box resting on z = center[2], rotated by yaw."""
    sx, sy, sz = size
    pts = []
    for a, b, fixed_axis, fixed_vals in (
        (sx, sz, 1, (-sy / 2, sy / 2)),
        (sy, sz, 0, (-sx / 2, sx / 2)),
    ):
        n = max(int(a * b / spacing**2), 4)
        for v in fixed_vals:
            u = rng.uniform(-a / 2, a / 2, n)
            h = rng.uniform(0, b, n)
            face = np.zeros((n, 3))
            face[:, 1 - fixed_axis] = u
            face[:, fixed_axis] = v
            face[:, 2] = h
            pts.append(face)
    n = max(int(sx * sy / spacing**2), 4)
    roof = np.stack([rng.uniform(-sx / 2, sx / 2, n), rng.uniform(-sy / 2, sy / 2, n), np.full(n, sz)], 1)
    pts.append(roof)
    P = np.concatenate(pts)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return P @ R.T + center


def _cylinder(rng, center, radius, height, spacing):
    n = max(int(2 * np.pi * radius * height / spacing**2), 8)
    ang = rng.uniform(0, 2 * np.pi, n)
    h = rng.uniform(0, height, n)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), h], 1) + center


def _sphere(rng, center, radius, spacing):
    n = max(int(4 * np.pi * radius**2 / spacing**2), 8)
    u = rng.normal(size=(n, 3))
    return radius * u / np.linalg.norm(u, axis=1, keepdims=True) + center


def procedural_scene(seed: int, extent: float = 32.0, spacing: float = 0.25) -> PointCloud:
    """Street-like scene: undulating ground, boxy buildings, poles and trees."""
    rng = np.random.Generator(np.random.PCG64([seed, 7919]))
    half = extent / 2
    n_ground = int(extent * extent / spacing**2)
    gx = rng.uniform(-half, half, n_ground)
    gy = rng.uniform(-half, half, n_ground)
    k1, k2 = rng.uniform(0.05, 0.2, 2)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    amp = rng.uniform(0.2, 0.6)

    def ground(x, y):
        return amp * np.sin(k1 * x + p1) * np.cos(k2 * y + p2)

    parts = [np.stack([gx, gy, ground(gx, gy)], 1)]
    occupied: list[tuple[float, float, float]] = []

    def free_spot(r):
        for _ in range(50):
            x, y = rng.uniform(-half + r, half - r, 2)
            if all((x - a) ** 2 + (y - b) ** 2 > (r + c) ** 2 for a, b, c in occupied):
                occupied.append((x, y, r))
                return x, y
        return None

    for _ in range(rng.integers(4, 8)):
        size = np.array([rng.uniform(3, 10), rng.uniform(3, 10), rng.uniform(2.5, 9)])
        spot = free_spot(0.5 * np.hypot(size[0], size[1]))
        if spot is None:
            continue
        x, y = spot
        parts.append(_box_surface(rng, np.array([x, y, ground(x, y)]), size, rng.uniform(0, np.pi), spacing))
    for _ in range(rng.integers(6, 12)):
        spot = free_spot(0.6)
        if spot is None:
            continue
        x, y = spot
        parts.append(_cylinder(rng, np.array([x, y, ground(x, y)]), rng.uniform(0.1, 0.3), rng.uniform(3, 7), spacing))
    for _ in range(rng.integers(5, 10)):
        r = rng.uniform(1.0, 2.5)
        spot = free_spot(r)
        if spot is None:
            continue
        x, y = spot
        trunk_h = rng.uniform(1.5, 3.5)
        base = np.array([x, y, ground(x, y)])
        parts.append(_cylinder(rng, base, 0.2, trunk_h, spacing))
        parts.append(_sphere(rng, base + np.array([0, 0, trunk_h + r]), r, spacing))
    return PointCloud(np.concatenate(parts))


# ------------------------------------------------------------------ pairs


def overlap_ratio(src: PointCloud, tgt: PointCloud, gt: RigidTransform, tau: float) -> float:
    """Fraction of GT-aligned source points whose nearest target point lies
    within ``tau``."""
    if not tau > 0:
        raise ParameterError("tau must be positive")
    if len(src) == 0 or len(tgt) == 0:
        return 0.0
    _, d = SpatialIndex(tgt).knn_many(gt.apply(src.points), 1)
    return float(np.mean(d[:, 0] <= tau))


def random_gt_transform(rng: np.random.Generator, cfg: ModelConfig) -> RigidTransform:
    yaw = rng.uniform(0.0, 2 * np.pi)
    tilt = np.radians(cfg.synth_max_tilt)
    roll, pitch = rng.uniform(-tilt, tilt, 2)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * cfg.synth_max_translation * rng.uniform() ** (1 / 3)
    return RigidTransform.from_euler(roll, pitch, yaw, t)


def crop_keep(points: np.ndarray, keep: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of the ``keep`` fraction of points on one side of a random
    vertical plane."""
    if keep >= 1.0:
        return np.arange(len(points))
    ang = rng.uniform(0, 2 * np.pi)
    proj = points[:, 0] * np.cos(ang) + points[:, 1] * np.sin(ang)
    n_keep = max(int(round(keep * len(points))), 1)
    return np.sort(np.argsort(proj, kind="stable")[:n_keep])


def synth_cross_source(base: PointCloud, seed: int, cfg: ModelConfig, overlap_tau: float | None = None) -> TrainSample:
    """Two differently sampled, noised and cropped views of ``base``.

    Both sensors sample the scene in the base frame; the target view is then
    moved into its own frame by the GT transform and optionally scaled.
    """
    if len(base) < MIN_BASE_POINTS:
        raise DegenerateInputError(f"base cloud needs >= {MIN_BASE_POINTS} points, got {len(base)}")
    rng = np.random.Generator(np.random.PCG64([seed, 104729]))
    tau = cfg.tau_a if overlap_tau is None else overlap_tau
    gt = random_gt_transform(rng, cfg)
    scale = 1.0 + rng.uniform(-cfg.synth_scale_jitter, cfg.synth_scale_jitter) if cfg.synth_scale_jitter > 0 else 1.0

    src_full = voxel_downsample(base, cfg.synth_voxel_src).points
    tgt_full = voxel_downsample(base, cfg.synth_voxel_tgt).points
    src_full = src_full + rng.normal(scale=cfg.synth_noise_src, size=src_full.shape) if cfg.synth_noise_src > 0 else src_full
    tgt_full = tgt_full + rng.normal(scale=cfg.synth_noise_tgt, size=tgt_full.shape) if cfg.synth_noise_tgt > 0 else tgt_full

    for _ in range(MAX_CROP_ATTEMPTS):
        src = PointCloud(src_full[crop_keep(src_full, cfg.synth_keep_src, rng)])
        tgt_base = PointCloud(tgt_full[crop_keep(tgt_full, cfg.synth_keep_tgt, rng)])
        ov = overlap_ratio(src, tgt_base, RigidTransform.identity(), tau)
        if ov >= 0.1:
            tgt = PointCloud(scale * gt.apply(tgt_base.points))
            return TrainSample(src, tgt, gt, ov, scale)
    raise DegenerateInputError(f"no crop with overlap >= 0.1 after {MAX_CROP_ATTEMPTS} attempts")


def make_dataset(n_pairs: int, seed: int, cfg: ModelConfig, pairs_per_scene: int = 4,
                 extent: float = 32.0) -> list[TrainSample]:
    """``n_pairs`` cross-source samples from freshly generated scenes."""
    out = []
    base = None
    for i in range(n_pairs):
        if i % pairs_per_scene == 0:
            base = procedural_scene(seed * 100003 + i // pairs_per_scene, extent)
        out.append(synth_cross_source(base, seed * 100003 + i, cfg))
    return out


# ------------------------------------------------------------------ manifest


@dataclass
class PairSpec:
    source: str
    target: str
    gt: RigidTransform
    split: str = "test"
    overlap: float | None = None


def write_manifest(path: str | Path, pairs: list[PairSpec]) -> None:
    lines = []
    for p in pairs:
        nums = [f"{v:.12e}" for v in p.gt.as_matrix()[:3].reshape(-1)]
        lines.append("\t".join([p.source, p.target, *nums, p.split]))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path: str | Path) -> list[PairSpec]:
    """Relative cloud paths are resolved against the manifest's directory."""
    root = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 15:
            raise ValueError(f"{path}:{lineno}: expected 15 tab-separated fields, got {len(f)}")
        M = np.array([float(v) for v in f[2:14]]).reshape(3, 4)
        resolve = lambda s: s if Path(s).is_absolute() else str(root / s)  # noqa: E731
        pairs.append(PairSpec(resolve(f[0]), resolve(f[1]), RigidTransform.from_matrix(M, orthonormalize=True), f[14]))
    return pairs


def write_pair_dir(out_dir: str | Path, samples: list[TrainSample], splits: list[str] | None = None) -> list[PairSpec]:
    """Write clouds as KITTI .bin files plus ``pairs.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for i, s in enumerate(samples):
        src_name, tgt_name = f"{i:04d}_src.bin", f"{i:04d}_tgt.bin"
        write_kitti_bin(out / src_name, s.source)
        write_kitti_bin(out / tgt_name, s.target)
        specs.append(PairSpec(src_name, tgt_name, s.gt, splits[i] if splits else "train", s.overlap))
    write_manifest(out / "pairs.tsv", specs)
    return specs


def load_samples(manifest: str | Path, split: str | None = None) -> list[TrainSample]:
    out = []
    for p in read_manifest(manifest):
        if split is not None and p.split != split:
            continue
        out.append(TrainSample(read_cloud(p.source), read_cloud(p.target), p.gt))
    return out
