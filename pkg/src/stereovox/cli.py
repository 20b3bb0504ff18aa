"""Command line entry point: synth, train, eval, ablate, infer, plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import Config, load_config, save_config

log = logging.getLogger("stereovox")

COST_VOLUME_AXIS = [
    {"name": "full-48", "cv_source": "full", "cv_max_disparity": 48},
    {"name": "even-24", "cv_source": "even", "cv_max_disparity": 48, "cv_even_step": 2},
    {"name": "even-12", "cv_source": "even", "cv_max_disparity": 48, "cv_even_step": 4},
    {"name": "voxel-12", "cv_source": "voxel", "cv_step_scale": 2.5},
]
DECODE_AXIS = [
    {"name": "straight", "decode_mode": "straight"},
    {"name": "dense", "decode_mode": "dense"},
    {"name": "sparse_gt", "decode_mode": "sparse_gt", "eval_decode_mode": "sparse_gt"},
    {"name": "sparse_pred", "decode_mode": "sparse_gt", "eval_decode_mode": "sparse_pred"},
]


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    g = p.add_argument_group("config overrides")
    for f in fields(Config):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            continue
        if f.type in ("bool", bool):
            g.add_argument(flag, type=_parse_bool, dest=f.name, default=None)
        elif f.type in ("list", list):
            g.add_argument(flag, type=lambda s: [float(x) for x in s.split(",") if x], dest=f.name, default=None)
        else:
            typ = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            g.add_argument(flag, type=typ, dest=f.name, default=None)


def _config_from_args(args) -> Config:
    base = load_config(args.config) if args.config else Config()
    overrides = {f.name: getattr(args, f.name) for f in fields(Config)
                 if getattr(args, f.name, None) is not None}
    d = base.to_dict()
    d.update(overrides)
    return Config.from_dict(d)


def cmd_synth(args):
    from .synth import generate_dataset

    cfg = _config_from_args(args)
    manifest = generate_dataset(cfg.n_scenes, cfg.scene_distribution(), cfg.dataset_root,
                                master_seed=cfg.seed, workers=cfg.workers)
    save_config(cfg, Path(cfg.dataset_root) / "config.json")
    print(f"wrote {manifest['n_scenes']} scenes to {cfg.dataset_root}")


def cmd_train(args):
    from .training import train

    cfg = _config_from_args(args)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(cfg.out_dir) / "config.json")
    res = train(cfg, log_every=args.log_every)
    print(f"best epoch {res.best_epoch}; checkpoint {res.checkpoint}")


def cmd_eval(args):
    from .training import evaluate

    rep = evaluate(args.checkpoint, args.split, dataset_root=args.dataset_root, mode=args.mode,
                   report_path=args.report, csv_path=args.csv)
    rep.pop("rows")
    print(json.dumps(rep, indent=1))


def cmd_ablate(args):
    from .training import ablate, format_table

    cfg = _config_from_args(args)
    if args.variants:
        variants = json.loads(Path(args.variants).read_text())
    else:
        variants = COST_VOLUME_AXIS if args.axis == "cost_volume" else DECODE_AXIS
    rows = ablate(cfg, variants, args.out, split=args.split)
    print(format_table(rows))


def cmd_infer(args):
    import torch

    from .geometry import OccupancyPyramid
    from .io import load_png, pyramid_to_json, save_json, write_bitmask
    from .macs import count_macs
    from .network import as_image_batch
    from .plotting import save_projections
    from .training import load_model

    model, cfg = load_model(args.checkpoint)
    left = as_image_batch(load_png(args.left), cfg.image_channels)
    right = as_image_batch(load_png(args.right), cfg.image_channels)
    mode = args.mode or cfg.eval_mode()
    if mode == "sparse_gt":
        raise SystemExit("sparse_gt needs ground truth; use sparse_pred or dense for inference")
    with torch.no_grad():
        res = model(left, right, mode=mode, max_level=args.level)
    grids = [p[0].numpy() for p in res.probs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    finest = cfg.n_levels if cfg.decode_mode == "straight" else len(grids)
    if cfg.decode_mode == "straight":
        pyr = OccupancyPyramid([grids[0]], cfg.grid().with_resolution(grids[0].shape[0]))
        level_ids = [finest]
    else:
        pyr = OccupancyPyramid(grids, cfg.grid().with_resolution(grids[-1].shape[0]))
        level_ids = list(range(1, len(grids) + 1))
    docs = pyramid_to_json(pyr)
    for d, l in zip(docs, level_ids):
        d["level"] = l
        save_json(out / f"level{l}.json", d)
    for g, l in zip(grids, level_ids):
        write_bitmask(out / f"level{l}.bin", g >= cfg.mask_threshold, l)
    save_projections([g >= cfg.mask_threshold for g in grids], out, level_ids)
    macs = count_macs(cfg.net(), res)
    print(json.dumps({"levels": level_ids, "occupied": [int((g >= cfg.mask_threshold).sum()) for g in grids],
                      "macs": macs["total"]}))


def cmd_plot(args):
    from .plotting import plot_history, plot_pyramid_json

    if args.history:
        plot_history(args.history, args.out)
    if args.pyramid:
        plot_pyramid_json(args.pyramid, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereovox", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_flags(s)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    _add_config_flags(s)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--dataset-root")
    s.add_argument("--mode", choices=["straight", "dense", "sparse_gt", "sparse_pred"])
    s.add_argument("--report", help="write the JSON report here")
    s.add_argument("--csv", help="write per-sample rows here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train/evaluate a grid of configs")
    _add_config_flags(s)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--axis", choices=["cost_volume", "decode"], default="cost_volume")
    s.add_argument("--variants", help="JSON list of override dicts (replaces --axis)")
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("infer", help="run one stereo pair and export voxels")
    s.add_argument("checkpoint")
    s.add_argument("--left", required=True)
    s.add_argument("--right", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["straight", "dense", "sparse_pred"])
    s.add_argument("--level", type=int, help="exit after this octree level")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("plot", help="plot loss curves and voxel projections")
    s.add_argument("--history", help="history.json from a training run")
    s.add_argument("--pyramid", help="pyramid.json of a sample")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
