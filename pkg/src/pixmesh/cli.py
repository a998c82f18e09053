"""Command-line driver: ``pixmesh {train,eval,compare,export-template,gen-scenes}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import PRESETS, RunConfig, load_config
from .mesh import export_obj, save_template
from .scene import export_scene
from .training import Pipeline, build_template, compare, evaluate_checkpoint, train


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else PRESETS[args.preset]()
    cfg = cfg.with_overrides(seed=args.seed, feature_mode=args.feature_mode, out_dir=args.out)
    if args.epochs_scale is not None:
        cfg = cfg.scaled(args.epochs_scale)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg, cfg.out_dir)
    last = {r["split"]: r for r in res.rows[-2:]}
    print(json.dumps({s: {"mpjpe": r["mpjpe"], "pa_mpjpe": r["pa_mpjpe"]} for s, r in last.items()}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = args.checkpoint or os.path.join(cfg.out_dir, "checkpoint.mgc")
    out = os.path.join(cfg.out_dir, f"eval_{args.split}")
    res = evaluate_checkpoint(cfg, ckpt, args.split, out, args.export)
    print(json.dumps(res["mean"]))
    return 0


def cmd_compare(args) -> int:
    a = _config(args)
    if args.config_b:
        b = load_config(args.config_b).with_overrides(seed=args.seed)
        if args.epochs_scale is not None:
            b = b.scaled(args.epochs_scale)
    else:
        a = a.with_overrides(feature_mode="local")
        b = a.with_overrides(feature_mode="global")
    rep = compare(a, b, a.out_dir)
    rep.pop("results")
    print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_export_template(args) -> int:
    cfg = _config(args)
    t = build_template(cfg.template)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_template(t, os.path.join(cfg.out_dir, "template.json"))
    export_obj(t.vertices, t.faces, os.path.join(cfg.out_dir, "template.obj"))
    print(f"{t.num_vertices} vertices, {t.num_faces} faces, {t.part_count} parts -> {cfg.out_dir}")
    return 0


def cmd_gen_scenes(args) -> int:
    cfg = _config(args)
    pipe = Pipeline.from_config(cfg)
    seeds = cfg.data.train_seeds(cfg.seed) if args.split == "train" else cfg.data.test_seeds(cfg.seed)
    for s in seeds[: args.count]:
        sample = pipe.sample(s)
        export_scene(sample.scene, pipe.template, os.path.join(cfg.out_dir, f"scene_{s}"))
    print(f"wrote {min(args.count, len(seeds))} scenes to {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults to the chosen preset)")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--feature-mode", choices=("local", "global"))
    common.add_argument("--epochs-scale", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="pixmesh", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train a model and log per-epoch metrics")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.mgc")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--export", type=int, default=None, help="OBJ pairs to export (default from config)")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("compare", parents=[common], help="train local and global arms and compare")
    p.add_argument("--config-b", help="second arm; defaults to the first config in global mode")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("export-template", parents=[common], help="write the template as JSON and OBJ")
    p.set_defaults(func=cmd_export_template)
    p = sub.add_parser("gen-scenes", parents=[common], help="export synthetic scenes")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_gen_scenes)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
