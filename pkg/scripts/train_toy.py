"""Train the toy preset on synthetic pairs and report held-out recall.

    python scripts/train_toy.py --train 64 --test 16 --epochs 50 --out toy.spw
"""
import argparse
import time

import numpy as np

from spreg.config import toy_config
from spreg.data import make_dataset
from spreg.metrics import compute_metrics, inlier_ratio
from spreg.params import ParameterStore
from spreg.pipeline import register, save_checkpoint, train


def evaluate(samples, params, cfg):
    rr, cir = [], []
    for s in samples:
        r = register(s.source, s.target, params, cfg)
        rr.append(compute_metrics(r.transform, s.gt, r.dense, cfg=cfg).success)
        cir.append(inlier_ratio(r.coarse, s.gt, cfg.coarse_inlier_radius))
    return float(np.mean(rr)), float(np.mean(cir))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=64)
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="checkpoint path")
    args = ap.parse_args()

    cfg = toy_config(seed=args.seed, epochs=args.epochs)
    train_set, test_set = make_dataset(args.train, 1, cfg), make_dataset(args.test, 2, cfg)
    print("untrained RR %.3f coarse IR %.3f" % evaluate(test_set, ParameterStore(cfg.seed), cfg))

    t0 = time.perf_counter()

    def log(epoch, stats):
        print(f"epoch {epoch:3d} {time.perf_counter() - t0:7.0f}s "
              + " ".join(f"{k}={v:.3f}" for k, v in stats.items()), flush=True)

    params, _, _ = train(train_set, cfg, log=log)
    print("trained   RR %.3f coarse IR %.3f" % evaluate(test_set, params, cfg))
    if args.out:
        save_checkpoint(args.out, params, cfg, cfg.epochs)


if __name__ == "__main__":
    main()
