"""Registration recall over a grid of (RRE, RTE) thresholds for a checkpoint.

    python scripts/threshold_sweep.py toy.spw --pairs 16
"""
import argparse
import tempfile
from pathlib import Path

from spreg.benchmark import RRE_GRID, RTE_GRID, run_benchmark
from spreg.data import make_dataset, read_manifest, write_pair_dir
from spreg.pipeline import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("ckpt")
    ap.add_argument("--pairs", type=int, default=16)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()

    params, cfg, _ = load_checkpoint(args.ckpt)
    with tempfile.TemporaryDirectory() as tmp:
        write_pair_dir(tmp, make_dataset(args.pairs, args.seed, cfg))
        result = run_benchmark(read_manifest(Path(tmp) / "pairs.tsv"), params, cfg)
    grid = {(a, b): r for a, b, r in result.sweep}
    print("RRE\\RTE " + " ".join(f"{b:6.2f}" for b in RTE_GRID))
    for a in RRE_GRID:
        print(f"{a:7.1f} " + " ".join(f"{grid[(a, b)]:6.3f}" for b in RTE_GRID))


if __name__ == "__main__":
    main()
