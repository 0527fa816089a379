"""Coarse inlier ratios with and without skeletal denoising and hybrid resampling.

    python scripts/denoise_ablation.py toy.spw --pairs 50
"""
import argparse

import numpy as np

from spreg.data import make_dataset
from spreg.metrics import inlier_ratio
from spreg.pipeline import denoise_skeletal, load_checkpoint, register


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("ckpt")
    ap.add_argument("--pairs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    params, cfg, _ = load_checkpoint(args.ckpt)
    R = cfg.coarse_inlier_radius
    rows = []
    for s in make_dataset(args.pairs, args.seed, cfg):
        r = register(s.source, s.target, params, cfg)
        rows.append([inlier_ratio(c, s.gt, R) for c in
                     (r.skeletal_raw, denoise_skeletal(r.skeletal_raw, cfg), r.coarse, r.hybrid)])
    for name, v in zip(("skeletal raw", "skeletal denoised", "superpoint only", "hybrid"), np.mean(rows, 0)):
        print(f"{name:18s} IR {v:.3f}")


if __name__ == "__main__":
    main()
