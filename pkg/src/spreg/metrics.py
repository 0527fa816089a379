"""Registration metrics: RRE, RTE, inlier ratio, success, recall."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .matching import CorrespondenceSet
from .transform import RigidTransform, rotation_error_deg, translation_error


@dataclass
class PairMetrics:
    rre: float
    rte: float
    ir: float
    success: bool


@dataclass
class MetricReport:
    pairs: list[PairMetrics] = field(default_factory=list)

    @property
    def recall(self) -> float:
        return float(np.mean([p.success for p in self.pairs])) if self.pairs else 0.0

    def _mean_success(self, attr: str) -> float:
        vals = [getattr(p, attr) for p in self.pairs if p.success]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_rre(self) -> float:
        return self._mean_success("rre")

    @property
    def mean_rte(self) -> float:
        return self._mean_success("rte")

    @property
    def mean_ir(self) -> float:
        return float(np.mean([p.ir for p in self.pairs])) if self.pairs else 0.0


def inlier_ratio(corr: CorrespondenceSet | None, gt: RigidTransform, radius: float) -> float:
    """Fraction of correspondences with GT-aligned residual below ``radius``."""
    if corr is None or len(corr) == 0:
        return 0.0
    res = np.linalg.norm(gt.apply(corr.src_xyz) - corr.tgt_xyz, axis=1)
    return float(np.mean(res < radius))


def is_success(rre: float, rte: float, rre_threshold: float, rte_threshold: float) -> bool:
    return bool(rre < rre_threshold and rte < rte_threshold)


def compute_metrics(est: RigidTransform, gt: RigidTransform, corr: CorrespondenceSet | None = None,
                    src=None, tgt=None, cfg: ModelConfig | None = None, radius: float | None = None) -> PairMetrics:
    cfg = cfg or ModelConfig()
    rre = rotation_error_deg(est.rotation, gt.rotation)
    rte = translation_error(est.translation, gt.translation)
    ir = inlier_ratio(corr, gt, cfg.tau_a if radius is None else radius)
    return PairMetrics(rre, rte, ir, is_success(rre, rte, cfg.rre_threshold, cfg.rte_threshold))
