"""Model/experiment configuration and the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    seed: int = 0

    # geometry / preprocessing
    voxel_size: float = 0.3
    icp_max_iters: int = 50
    icp_max_corr_dist: float = 1.0

    # backbone
    num_levels: int = 4
    level_widths: tuple[int, ...] = (32, 64, 128, 256)
    d_t: int = 256
    d_dense: int = 64
    dense_level: int = 0
    backbone_k: int = 16
    n_patch: int = 64
    rel_frame: str = "yaw"  # "yaw", "lrf" (both yaw-invariant) or "global"

    # skeleton extraction
    n_skeleton: int = 64
    lambda1: float = 0.3
    lambda2: float = 0.4
    sphere_samples: int = 8

    # skeleton-aware transformer
    n_interleave: int = 3
    heads: int = 1
    knn_skeleton: int = 3
    knn_angle: int = 3
    sigma_d: float = 4.8
    sigma_a: float = 15.0
    sigma_d_s: float = 4.8
    sigma_a_s: float = 15.0
    cross_keys: str = "full"  # "full" or "superpoints"

    # correspondence sampling and pose
    n_coarse: int = 128
    n_replace: int = 32
    n_topk_skeletal: int = 16
    dual_norm: str = "softmax"  # "softmax" or "sum"
    sigma_c: float = 0.6
    tau_conflict: float = 0.5
    min_cluster: int = 3
    denoise_rule: str = "compatibility"  # or "one_to_one"
    sinkhorn_iters: int = 100
    dense_topk: int = 3
    tau_m: float = 0.05
    tau_a: float = 0.6
    lgr_refine: int = 5
    # per-candidate refits before selection, radii as multiples of tau_a; empty = none
    lgr_candidate_radii: tuple[float, ...] = ()

    # losses / training
    circle_pos_margin: float = 0.1
    circle_neg_margin: float = 1.4
    circle_scale: float = 10.0
    positive_overlap: float = 0.1
    pm_num_pairs: int = 32
    optimize_mode: str = "joint"  # or "alternate"
    lr: float = 1e-4
    weight_decay: float = 1e-6
    epochs: int = 200

    # metrics
    rre_threshold: float = 5.0
    rte_threshold: float = 2.0
    coarse_inlier_radius: float = 2.4

    # synthetic cross-source pairs
    synth_voxel_src: float = 0.3
    synth_voxel_tgt: float = 0.45
    synth_noise_src: float = 0.02
    synth_noise_tgt: float = 0.05
    synth_keep_src: float = 0.8
    synth_keep_tgt: float = 0.8
    synth_scale_jitter: float = 0.02
    synth_max_translation: float = 5.0
    synth_max_tilt: float = 2.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        counts = (
            "num_levels n_skeleton heads knn_skeleton knn_angle n_coarse "
            "sinkhorn_iters dense_topk lgr_refine backbone_k n_patch d_t d_dense sphere_samples"
        ).split()
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_interleave < 0:
            raise ConfigError("n_interleave must be >= 0")
        for name in "sigma_d sigma_a sigma_d_s sigma_a_s sigma_c voxel_size tau_a".split():
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not self.n_topk_skeletal <= self.n_replace <= self.n_coarse:
            raise ConfigError("need n_topk_skeletal <= n_replace <= n_coarse")
        if any(r <= 0 for r in self.lgr_candidate_radii):
            raise ConfigError("lgr_candidate_radii must be positive")
        if len(self.level_widths) != self.num_levels:
            raise ConfigError("level_widths must have num_levels entries")
        if not 0 <= self.dense_level < self.num_levels - 1:
            raise ConfigError("dense_level must be below the superpoint level")
        if self.d_t % 2 or self.d_dense % 2:
            raise ConfigError("d_t and d_dense must be even")
        if self.d_t % self.heads:
            raise ConfigError("d_t must be divisible by heads")
        if self.rel_frame not in ("yaw", "lrf", "global"):
            raise ConfigError(f"unknown rel_frame {self.rel_frame!r}")
        if self.cross_keys not in ("full", "superpoints"):
            raise ConfigError(f"unknown cross_keys {self.cross_keys!r}")
        if self.dual_norm not in ("softmax", "sum"):
            raise ConfigError(f"unknown dual_norm {self.dual_norm!r}")
        if self.denoise_rule not in ("compatibility", "one_to_one"):
            raise ConfigError(f"unknown denoise_rule {self.denoise_rule!r}")
        if self.optimize_mode not in ("joint", "alternate"):
            raise ConfigError(f"unknown optimize_mode {self.optimize_mode!r}")

    @property
    def level_voxels(self) -> tuple[float, ...]:
        return tuple(self.voxel_size * 2**i for i in range(self.num_levels))

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text format

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    @classmethod
    def from_text(cls, text: str, base: ModelConfig | None = None) -> ModelConfig:
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "preset":
                base = preset(value)
                continue
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            changes[key] = _coerce(getattr(base, key), value, key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        return cls.from_text(Path(path).read_text())


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _coerce(default, value: str, key: str):
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(_number(v.strip()) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale preset used by the synthetic experiments and tests."""
    cfg = ModelConfig(
        voxel_size=1.0,
        num_levels=3,
        level_widths=(32, 32, 32),
        d_t=32,
        d_dense=16,
        backbone_k=32,
        n_patch=24,
        n_skeleton=16,
        n_interleave=2,
        knn_skeleton=3,
        knn_angle=3,
        n_coarse=48,
        n_replace=12,
        n_topk_skeletal=6,
        sinkhorn_iters=30,
        pm_num_pairs=16,
        lr=1e-3,
        epochs=50,
        tau_a=1.5,
        lgr_candidate_radii=(4.0, 2.0, 1.0, 1.0),
        coarse_inlier_radius=4.0,
        synth_voxel_src=0.5,
        synth_voxel_tgt=0.7,
    )
    return dataclasses.replace(cfg, **overrides)


def forest_config(**overrides) -> ModelConfig:
    """Forest-scale success thresholds (0.5 deg, 0.3 m)."""
    return dataclasses.replace(ModelConfig(rre_threshold=0.5, rte_threshold=0.3), **overrides)


PRESETS = {"default": ModelConfig, "toy": toy_config, "forest": forest_config}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}") from None
