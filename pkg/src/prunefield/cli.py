"""Command-line interface. Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical error."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _add_globals(p):
    p.add_argument("--config", help="JSON file mirroring PipelineConfig")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output path")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS so reductions run in a fixed order")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunefield", description=__doc__)
    _add_globals(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p)
        return p

    p = cmd("synth", "render a synthetic contaminated dataset")
    p.add_argument("--scene", choices=("tabletop", "two-sphere"), default="tabletop")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--test-views", type=int, default=5)
    p.add_argument("--probability", type=float, default=0.5)
    p.add_argument("--shape", choices=("disk", "rectangle", "mixed"), default="disk")

    p = cmd("train", "fit a field to a dataset")
    p.add_argument("--dataset")
    p.add_argument("--mask", help="directory of mask_*.png; masked pixels are not trained on")

    p = cmd("score", "per-pixel distraction scores")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("loss", "gradnorm", "self_influence"))

    p = cmd("consistency", "3-sigma multi-view flags from scores")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", required=True, help="field providing depth")
    p.add_argument("--scores", required=True)

    p = cmd("segment", "segment every training view")
    p.add_argument("--dataset")

    p = cmd("refine", "segment-level distraction mask from pixel flags")
    p.add_argument("--flags", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--epsilon", type=float)

    p = cmd("prune-retrain", "retrain without masked pixels")
    p.add_argument("--dataset")
    p.add_argument("--mask", required=True)

    p = cmd("eval", "test-view PSNR/SSIM and mask metrics")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask")

    cmd("pipeline", "run every stage (resumable)")
    cmd("ablate", "baseline / +IF / +IF&3D / full ladder")
    return parser


def _config(args, need_dataset=True):
    from .pipeline import PipelineConfig

    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = PipelineConfig(dataset=getattr(args, "dataset", None) or "")
    updates = {}
    if getattr(args, "dataset", None):
        updates["dataset"] = args.dataset
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out:
        updates["out"] = args.out
    if args.deterministic:
        updates["deterministic"] = True
    if getattr(args, "metric", None):
        updates["metric"] = args.metric
    import dataclasses

    cfg = dataclasses.replace(cfg, **updates)
    if need_dataset and not cfg.dataset:
        from .errors import ConfigError
        raise ConfigError("no dataset given (--dataset or 'dataset' in --config)")
    return cfg


def _print(obj):
    print(json.dumps(obj, indent=1))


def run(args) -> int:
    import dataclasses

    import numpy as np

    from . import consistency as cons
    from . import influence as infl
    from . import pipeline as pl
    from . import segment as segm
    from . import synth
    from .field import model
    from .field.train import train as fit_field

    c = args.command
    if c == "synth":
        cfg = _config(args, need_dataset=False)
        out = Path(args.out or "dataset")
        if args.scene == "tabletop":
            scene = synth.tabletop_scene(**synth.BENCHMARK_SCENE)
            cams, tests = synth.benchmark_cameras(args.views, args.size, args.test_views)
        else:
            scene = synth.two_sphere_scene()
            cams, tests = synth.two_sphere_cameras(args.views, args.size, args.test_views)
        spec = synth.DistractorSpec(per_view_probability=args.probability, shape=args.shape, seed=cfg.seed)
        man = synth.generate_dataset(scene, cams, spec, out, test_cameras=tests)
        _print({"root": str(out), "views": man.view_count,
                "contaminated": len(man.contaminated_views)})
        return 0

    cfg = _config(args, need_dataset=c not in ("refine", "pipeline", "ablate"))
    if c == "pipeline":
        res = pl.run_pipeline(cfg)
        _print(res.manifest.metrics)
        return 0
    if c == "ablate":
        _print(pl.ablate(cfg))
        return 0
    if c == "refine":
        flags = cons.FlagMap.load(args.flags)
        files = sorted(Path(args.segments).glob("seg_*.png"))
        segs = [segm.load_external_segments(f, flags.flagged.shape[1:]) for f in files]
        eps = cfg.refine.epsilon if args.epsilon is None else args.epsilon
        mask = segm.refine_pixel_to_segment(flags, segs, eps)
        segm.save_mask(args.out or "mask", mask)
        _print({"mask_fraction": float(mask.mean())})
        return 0

    dataset = synth.load_dataset(cfg.dataset)
    tcfg = cfg.train_seeded
    out = Path(args.out or c)
    if c in ("train", "prune-retrain"):
        keep = None
        if args.mask:
            keep = pl.prune(dataset, segm.load_mask(args.mask, dataset.n_views))
        params, tlog = fit_field(dataset, keep, tcfg, cfg.render)
        out.mkdir(parents=True, exist_ok=True)
        model.save_checkpoint(out / "field.npz", params, train=tcfg, render=cfg.render)
        tlog.write_csv(out / "train_log.csv")
        _print({"checkpoint": str(out / "field.npz"), "final_loss": tlog.loss[-1]})
        return 0
    if c == "score":
        params, _ = model.load_checkpoint(args.checkpoint)
        pl._score_stage(params, dataset, cfg, out)
        _print({"scores": str(out / "scores"), "metric": cfg.metric})
        return 0
    if c == "consistency":
        params, _ = model.load_checkpoint(args.checkpoint)
        smap = infl.ScoreMap.load(args.scores)
        pts = cons.point_maps(params, dataset.cameras, dataclasses.replace(cfg.render, stratified=False))
        fm = cons.flag_all(pts, dataset.cameras, smap, cfg.consistency)
        fm.save(out)
        s = fm.summary()
        _print({k: s[k] for k in ("flagged", "undetermined", "pixels")})
        return 0
    if c == "segment":
        segs = segm.segment_views(dataset.images, cfg.refine)
        out.mkdir(parents=True, exist_ok=True)
        for v, s in enumerate(segs):
            s.save(out / f"seg_{v:04d}.png")
        _print({"segments_per_view": [s.count for s in segs]})
        return 0
    if c == "eval":
        params, _ = model.load_checkpoint(args.checkpoint)
        metrics = pl.evaluate(params, dataset, cfg.render)
        if args.mask and dataset.masks is not None:
            metrics["mask"] = pl.mask_metrics(segm.load_mask(args.mask, dataset.n_views), dataset.masks)
        if args.out:
            pl.atomic_write_text(args.out, json.dumps(metrics, indent=1))
        _print(metrics)
        return 0
    raise AssertionError(c)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    from .errors import PruneFieldError

    try:
        return run(args)
    except PruneFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
