"""Command line entry point: ``spreg <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .backbone import extract_pyramid
from .benchmark import dump_correspondences, run_benchmark
from .cloud import PointCloud
from .config import ModelConfig, preset
from .data import make_dataset, procedural_scene, read_manifest, synth_cross_source, write_pair_dir
from .io import format_pose, read_cloud, read_poses, write_kitti_bin, write_ply
from .matching import DENSE, CorrespondenceSet
from .params import AdamState, ParameterStore
from .pipeline import TrainSample, load_checkpoint, preprocess, register, save_checkpoint, train_epoch
from .skeleton import extract_skeleton

log = logging.getLogger("spreg")


def _load_config(path: str | None, preset_name: str) -> ModelConfig:
    base = preset(preset_name)
    return ModelConfig.from_text(Path(path).read_text(), base) if path else base


def cmd_scene(args) -> int:
    cloud = procedural_scene(args.seed, args.extent)
    out = Path(args.out)
    if out.suffix == ".ply":
        write_ply(out, cloud)
    else:
        write_kitti_bin(out, cloud)
    print(f"{len(cloud)} points -> {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args.config, args.preset)
    if args.base:
        base = read_cloud(args.base)
        samples = [synth_cross_source(base, args.seed * 100003 + i, cfg) for i in range(args.n_pairs)]
    else:
        samples = make_dataset(args.n_pairs, args.seed, cfg, extent=args.extent)
    specs = write_pair_dir(args.out, samples, [args.split] * len(samples))
    print(f"{len(specs)} pairs -> {Path(args.out) / 'pairs.tsv'}")
    return 0


def _training_set(data: str, split: str | None) -> list[TrainSample]:
    path = Path(data)
    manifest = path / "pairs.tsv" if path.is_dir() else path
    specs = read_manifest(manifest)
    if split:
        specs = [s for s in specs if s.split == split]
    return [TrainSample(read_cloud(s.source), read_cloud(s.target), s.gt) for s in specs]


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    dataset = _training_set(args.data, args.split)
    if not dataset:
        raise ValueError(f"no training pairs in {args.data}")
    epochs = cfg.epochs if args.epochs is None else args.epochs
    params = ParameterStore(cfg.seed)
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(epochs):
        stats = train_epoch(dataset, params, adam, cfg, epoch)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in stats.items()))
    save_checkpoint(args.out, params, cfg, epochs)
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_register(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    src, tgt = read_cloud(args.src), read_cloud(args.tgt)
    result = register(src, tgt, params, cfg)
    print(format_pose(result.transform))
    if args.dump_corr:
        gt = read_poses(args.gt)[0] if args.gt else None
        dump_correspondences(args.dump_corr, _all_sets(result), gt, cfg.tau_a)
    return 0


def _all_sets(result):
    return CorrespondenceSet.concat([result.hybrid, result.dense.subset(result.dense.kinds == DENSE)])


def cmd_eval(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    pairs = read_manifest(args.pairs)
    if args.split:
        pairs = [p for p in pairs if p.split == args.split]
    res = run_benchmark(pairs, params, cfg, args.out, args.workers)
    print(f"pairs={len(pairs)} RR={res.report.recall:.4f} IR={res.report.mean_ir:.4f} "
          f"RRE={res.report.mean_rre:.4f} RTE={res.report.mean_rte:.4f}")
    return 0


def cmd_skeleton(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    src = read_cloud(args.src)
    pyr = extract_pyramid(preprocess(src, cfg), params, cfg)
    skel = extract_skeleton(pyr.superpoints, pyr.superpoint_features, params, cfg)
    write_ply(args.out, PointCloud(skel.points.data), extra={"radius": np.asarray(skel.radii.data).reshape(-1)})
    print(f"{len(skel.points.data)} skeleton points -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spreg", description="skeleton-prior point cloud registration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--preset", default="toy", help="base preset (default, toy, forest)")

    sp = sub.add_parser("scene", help="write a procedural street scene")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--extent", type=float, default=32.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_scene)

    sp = sub.add_parser("synth", help="generate synthetic cross-source pairs")
    sp.add_argument("--base", help="base cloud; procedural scenes when omitted")
    sp.add_argument("--n-pairs", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split", default="train")
    sp.add_argument("--extent", type=float, default=32.0)
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train and write a checkpoint")
    sp.add_argument("--data", required=True, help="pair directory or manifest")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--split", help="only use pairs with this split tag")
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("register", help="register one pair; prints the 3x4 pose")
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--dump-corr", help="CSV of coarse and dense correspondences")
    sp.add_argument("--gt", help="pose file whose first line is the GT, for inlier flags")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("eval", help="benchmark a checkpoint on a manifest")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("skeleton", help="export skeleton points and radii as PLY")
    sp.add_argument("--src", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_skeleton)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        print(f"spreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
