"""Benchmark runner: register every manifest pair, aggregate metrics and
write the per-pair, threshold-sweep and overlap-bin CSVs."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .data import PairSpec, overlap_ratio
from .io import read_cloud
from .matching import CorrespondenceSet
from .metrics import MetricReport, PairMetrics, compute_metrics, is_success
from .params import ParameterStore
from .pipeline import register

log = logging.getLogger(__name__)

RRE_GRID = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 15.0)
RTE_GRID = (0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0)
OVERLAP_BIN = 0.1

PAIR_HEADER = ["index", "source", "target", "split", "overlap", "rre_deg", "rte_m", "ir", "success", "error"]
SWEEP_HEADER = ["rre_threshold_deg", "rte_threshold_m", "recall"]
BIN_HEADER = ["overlap_lo", "overlap_hi", "pairs", "recall", "mean_ir"]


@dataclass
class PairOutcome:
    spec: PairSpec
    metrics: PairMetrics
    overlap: float = float("nan")
    error: str = ""


@dataclass
class BenchmarkResult:
    report: MetricReport
    outcomes: list[PairOutcome] = field(default_factory=list)
    sweep: list[tuple[float, float, float]] = field(default_factory=list)
    bins: list[tuple[float, float, int, float, float]] = field(default_factory=list)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("SPREG_THREADS")
    if env:
        return max(1, int(env))
    return max(1, requested or 1)


def _evaluate_pair(spec: PairSpec, params: ParameterStore, cfg: ModelConfig) -> PairOutcome:
    try:
        src, tgt = read_cloud(spec.source), read_cloud(spec.target)
        result = register(src, tgt, params, cfg)
    except Exception as exc:  # noqa: BLE001 - a bad pair is a recorded failure
        log.warning("pair %s / %s failed: %s", spec.source, spec.target, exc)
        return PairOutcome(spec, PairMetrics(float("nan"), float("nan"), 0.0, False), error=type(exc).__name__)
    m = compute_metrics(result.transform, spec.gt, result.dense, cfg=cfg)
    ov = spec.overlap if spec.overlap is not None else overlap_ratio(src, tgt, spec.gt, cfg.tau_a)
    return PairOutcome(spec, m, ov)


def threshold_sweep(outcomes: list[PairOutcome], rre_grid=RRE_GRID, rte_grid=RTE_GRID) -> list[tuple[float, float, float]]:
    rows = []
    for a in rre_grid:
        for b in rte_grid:
            hits = [is_success(o.metrics.rre, o.metrics.rte, a, b) for o in outcomes]
            rows.append((a, b, float(np.mean(hits)) if hits else 0.0))
    return rows


def overlap_bins(outcomes: list[PairOutcome], width: float = OVERLAP_BIN) -> list[tuple[float, float, int, float, float]]:
    n_bins = int(round(1.0 / width))
    rows = []
    for k in range(n_bins):
        lo, hi = k * width, (k + 1) * width
        inside = [o for o in outcomes if np.isfinite(o.overlap)
                  and (lo <= o.overlap < hi or (k == n_bins - 1 and o.overlap == hi))]
        if not inside:
            continue
        rows.append((lo, hi, len(inside), float(np.mean([o.metrics.success for o in inside])),
                     float(np.mean([o.metrics.ir for o in inside]))))
    return rows


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def run_benchmark(pairs: list[PairSpec], params: ParameterStore, cfg: ModelConfig, out_dir: str | Path | None = None,
                  workers: int | None = None) -> BenchmarkResult:
    n_workers = worker_count(workers)
    outcomes: list[PairOutcome] = []
    if pairs:
        # first pair runs alone so any lazily created parameter exists before threads start
        outcomes.append(_evaluate_pair(pairs[0], params, cfg))
        rest = pairs[1:]
        if n_workers > 1 and rest:
            with ThreadPoolExecutor(n_workers) as pool:
                outcomes.extend(pool.map(lambda p: _evaluate_pair(p, params, cfg), rest))
        else:
            outcomes.extend(_evaluate_pair(p, params, cfg) for p in rest)
    result = BenchmarkResult(MetricReport([o.metrics for o in outcomes]), outcomes,
                             threshold_sweep(outcomes), overlap_bins(outcomes))
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: BenchmarkResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "pairs.csv", PAIR_HEADER, [
        (i, o.spec.source, o.spec.target, o.spec.split, o.overlap, o.metrics.rre, o.metrics.rte, o.metrics.ir,
         o.metrics.success, o.error)
        for i, o in enumerate(result.outcomes)
    ])
    _write_csv(out / "sweep.csv", SWEEP_HEADER, result.sweep)
    _write_csv(out / "overlap_bins.csv", BIN_HEADER, result.bins)


def dump_correspondences(path: str | Path, corr: CorrespondenceSet, gt=None, radius: float = 0.6) -> None:
    """Debug dump: kind, src xyz, tgt xyz, score, inlier flag under GT (empty without GT)."""
    rows = []
    inl = None
    if gt is not None and len(corr):
        inl = np.linalg.norm(gt.apply(corr.src_xyz) - corr.tgt_xyz, axis=1) < radius
    for k in range(len(corr)):
        flag = "" if inl is None else bool(inl[k])
        rows.append((corr.kinds[k], *corr.src_xyz[k], *corr.tgt_xyz[k], corr.scores[k], flag))
    _write_csv(Path(path), ["kind", "src_x", "src_y", "src_z", "tgt_x", "tgt_y", "tgt_z", "score", "is_inlier_under_gt"], rows)
