"""Toy overfit run: 4 Bi-Art. sequences of 32 frames, 2000 VAE steps each, 500 diffusion steps.

    python scripts/overfit.py --out runs/overfit
"""
import argparse
import time
from pathlib import Path

import torch

from hoigen.config import RunConfig
from hoigen.data import Family, generate_dataset
from hoigen.training import loss_ratio, smoothed, train_diffusion, train_jointvae, train_manivae


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--vae-steps", type=int, default=2000)
    p.add_argument("--diffusion-steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    torch.set_num_threads(1)
    out = Path(args.out)
    cfg = RunConfig(seed=args.seed)
    ds = generate_dataset([Family.BI_ART], 4, args.seed, 32)

    t0 = time.perf_counter()
    j = train_jointvae(cfg, ds, steps=args.vae_steps, ckpt_path=out / "joint.ckpt", log_path=out / "jointvae.csv")
    print(f"jointvae  {j.history[0]['total']:.4g} -> {j.history[-1]['total']:.4g}  ratio {loss_ratio(j.history):.2e}")
    m = train_manivae(cfg, ds, steps=args.vae_steps, ckpt_path=out / "mani.ckpt", log_path=out / "manivae.csv")
    print(f"manivae   {m.history[0]['total']:.4g} -> {m.history[-1]['total']:.4g}  ratio {loss_ratio(m.history):.2e}")
    d = train_diffusion(cfg, ds, j.model, m.model, steps=args.diffusion_steps, ckpt_path=out / "diff.ckpt",
                        log_path=out / "diffusion.csv")
    s = smoothed([h["total"] for h in d.history], 50)
    print(f"diffusion smoothed {s[0]:.4f} -> {s[-1]:.4f}")
    print(f"total {time.perf_counter() - t0:.0f}s, checkpoints in {out}")


if __name__ == "__main__":
    main()
