"""Backbone ablation (GRU / temporal conv / attention / SSM) plus the wall-time scaling benchmark.

    python scripts/ablation.py --out runs/ablation [--config cfg.yaml]
"""
import argparse

import torch

from hoigen.ablate import run_ablation, scaling_report, write_ablation
from hoigen.config import load_config
from hoigen.data import Family, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--no-scaling", action="store_true")
    args = p.parse_args()

    torch.set_num_threads(1)
    cfg = load_config(args.config)
    families = [Family.parse(f) for f in cfg.data.families]
    ds = generate_dataset(families, cfg.data.count, cfg.seed, cfg.ablate.frames)
    res = run_ablation(cfg, ds)
    print(res.table, end="")
    scaling = None
    if not args.no_scaling:
        scaling = scaling_report(cfg.ablate.backbones, cfg.ablate.scaling_lengths, cfg.diffusion.ssm.model_dim)
        print(scaling, end="")
    for path in write_ablation(res, args.out, scaling).values():
        print("wrote", path)


if __name__ == "__main__":
    main()
