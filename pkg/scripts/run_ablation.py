"""Local-versus-global feature ablation on the desk preset over several seeds.

Usage: python3 scripts/run_ablation.py --seeds 0 1 2 --out runs/ablation [--epochs-scale 1.0]
"""
import argparse
import json
import logging
import os
import time

from pixmesh.config import PRESETS, load_config
from pixmesh.training import compare


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs-scale", type=float, default=1.0)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    base = load_config(args.config) if args.config else PRESETS[args.preset]()
    base = base.scaled(args.epochs_scale)
    summary = {}
    t0 = time.perf_counter()
    for seed in args.seeds:
        a = base.with_overrides(seed=seed, feature_mode="local")
        b = base.with_overrides(seed=seed, feature_mode="global")
        rep = compare(a, b, os.path.join(args.out, f"seed{seed}"))
        la, gb = rep["arms"]["a"]["final"]["mpjpe"], rep["arms"]["b"]["final"]["mpjpe"]
        summary[seed] = {"local_mpjpe": la, "global_mpjpe": gb,
                         "local_pa_mpjpe": rep["arms"]["a"]["final"]["pa_mpjpe"],
                         "global_pa_mpjpe": rep["arms"]["b"]["final"]["pa_mpjpe"]}
        print(f"seed {seed}: local {la:.4f}  global {gb:.4f}")
    summary["seconds"] = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
