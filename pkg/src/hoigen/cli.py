"""``hoigen`` command-line entry point."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .ablate import run_ablation, scaling_report, write_ablation
from .config import RunConfig, load_config
from .core import HandType
from .data import (DATASET_MAGIC, Family, generate_dataset, load_dataset, load_sequence, make_object, record_from_sample,
                   save_dataset, save_sequence, sequence_from_bytes)
from .errors import DependencyError, FileNotFound, HOIError
from .geometry import ArticulatedObjectModel
from .metrics import METRIC_NAMES, evaluate_sequences
from .plots import plot_sequence
from .ssm import BACKBONES
from .training import (Condition, generate, load_diffusion, load_jointvae, load_manivae, train_diffusion,
                       train_jointvae, train_manivae)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--seed", type=int, help="overrides config seed")
    p.add_argument("--out", help="output path")
    p.add_argument("--backbone", choices=BACKBONES, help="temporal denoiser backbone")
    p.add_argument("--family", action="append", help="task family (repeatable): bi-art, bi-rigid, single-art, single-rigid")
    p.add_argument("--frames", type=int, help="sequence length N")
    return p


def _config(args) -> RunConfig:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.backbone is not None:
        over.setdefault("diffusion", {})["ssm"] = {"backbone": args.backbone}
    if args.family:
        names = [f for item in args.family for f in item.split(",") if f]
        for n in names:
            Family.parse(n)
        over.setdefault("data", {})["families"] = names
    cfg = load_config(args.config, over)
    if args.frames is not None:
        cfg.data.frames = cfg.sample.frames = cfg.ablate.frames = args.frames
    return cfg


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing {what}: {path}")
    return path


def cmd_generate(args, cfg: RunConfig) -> str:
    families = [Family.parse(f) for f in cfg.data.families]
    count = args.count if args.count is not None else cfg.data.count
    ds = generate_dataset(families, count, cfg.seed, cfg.data.frames)
    out = Path(args.out or cfg.paths.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    return f"wrote {len(ds.samples)} sequences to {out}"


def cmd_make_object(args, cfg: RunConfig) -> str:
    rng = np.random.default_rng(cfg.seed)
    obj = make_object(rng, not args.rigid, cfg.data.object_points)
    out = Path(args.out or "object.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    obj.save(out)
    return f"wrote {obj.name} ({'rigid' if args.rigid else 'articulated'}) to {out}"


def cmd_train_vae(args, cfg: RunConfig) -> str:
    ds = load_dataset(args.dataset or cfg.paths.dataset)
    which = args.which
    out = args.out or (cfg.paths.joint_ckpt if which == "joint" else cfg.paths.mani_ckpt)
    log = Path(cfg.paths.log_dir) / f"{which}vae.csv"
    fn = train_jointvae if which == "joint" else train_manivae
    res = fn(cfg, ds, steps=args.steps, resume=args.resume, ckpt_path=out, log_path=log)
    last = res.history[-1]["total"] if res.history else float("nan")
    return f"{which}vae step {res.step} loss {last:.6g} -> {out} (sha256 {res.checkpoint_hash[:12]})"


def cmd_train_diffusion(args, cfg: RunConfig) -> str:
    jp = _require(args.joint or cfg.paths.joint_ckpt, "JointVAE checkpoint")
    mp = _require(args.mani or cfg.paths.mani_ckpt, "ManiVAE checkpoint")
    ds = load_dataset(args.dataset or cfg.paths.dataset)
    joint, mani = load_jointvae(jp), load_manivae(mp)
    out = args.out or cfg.paths.diffusion_ckpt
    log = Path(cfg.paths.log_dir) / "diffusion.csv"
    hashes = {"jointvae": checkpoint.file_hash(jp), "manivae": checkpoint.file_hash(mp)}
    res = train_diffusion(cfg, ds, joint, mani, steps=args.steps, resume=args.resume, ckpt_path=out, log_path=log,
                          vae_hashes=hashes)
    last = res.history[-1]["total"] if res.history else float("nan")
    return f"diffusion[{cfg.diffusion.ssm.backbone}] step {res.step} loss {last:.6g} -> {out}"


def _load_models(cfg: RunConfig, args):
    jp = _require(getattr(args, "joint", None) or cfg.paths.joint_ckpt, "JointVAE checkpoint")
    mp = _require(getattr(args, "mani", None) or cfg.paths.mani_ckpt, "ManiVAE checkpoint")
    dp = _require(getattr(args, "diffusion", None) or cfg.paths.diffusion_ckpt, "diffusion checkpoint")
    return load_jointvae(jp), load_manivae(mp), load_diffusion(dp)


def cmd_sample(args, cfg: RunConfig) -> str:
    n = cfg.sample.frames
    hand_type = HandType.parse(args.type or cfg.sample.hand_type)
    instruction = args.instruction or cfg.sample.instruction
    if args.object:
        obj = ArticulatedObjectModel.load(args.object)
    else:
        obj = make_object(np.random.default_rng(cfg.sample.object_seed), True, cfg.data.object_points)
    joint, mani, diff = _load_models(cfg, args)
    rec = generate(joint, mani, diff, [Condition(obj, instruction, hand_type)], n, cfg.seed)[0]
    out = Path(args.out or f"sample_{cfg.seed}.seq")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_sequence(rec, out)
    return f"wrote {n}-frame {hand_type.name.lower()} sequence to {out}"


def _read_records(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFound(f"file not found: {path}")
    data = path.read_bytes()
    if data[:8] == DATASET_MAGIC:
        return [record_from_sample(s) for s in load_dataset(path).samples]
    return [sequence_from_bytes(data, str(path))]


def cmd_evaluate(args, cfg: RunConfig) -> str:
    records = [r for p in args.sequences for r in _read_records(p)]
    reference = _read_records(args.reference) if args.reference else None
    metrics = tuple(m.strip().lower() for m in args.metrics.split(",")) if args.metrics else METRIC_NAMES
    m = cfg.metrics
    report = evaluate_sequences(records, reference, m.voxel_size, m.hand_radius, m.dt, metrics)
    text = report.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    if args.table:
        Path(args.table).parent.mkdir(parents=True, exist_ok=True)
        Path(args.table).write_text(report.to_table())
    return text.rstrip()


def cmd_ablate(args, cfg: RunConfig) -> str:
    ds = load_dataset(args.dataset or cfg.paths.dataset)
    res = run_ablation(cfg, ds)
    scaling = None if args.no_scaling else scaling_report(cfg.ablate.backbones, cfg.ablate.scaling_lengths,
                                                          cfg.diffusion.ssm.model_dim)
    paths = write_ablation(res, args.out or "ablation", scaling)
    return res.table.rstrip() + "\n" + "\n".join(f"wrote {p}" for p in paths.values())


def cmd_plot(args, cfg: RunConfig) -> str:
    rec = load_sequence(args.sequence)
    out = plot_sequence(rec, args.out or Path(args.sequence).with_suffix(".png"))
    return f"wrote {out}"


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(prog="hoigen", description="Bimanual hand-object interaction synthesis toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--count", type=int)
    g.set_defaults(fn=cmd_generate)

    o = sub.add_parser("make-object", parents=[common], help="write a random object asset (JSON)")
    o.add_argument("--rigid", action="store_true")
    o.set_defaults(fn=cmd_make_object)

    v = sub.add_parser("train-vae", parents=[common], help="train JointVAE or ManiVAE")
    v.add_argument("--which", choices=("joint", "mani"), required=True)
    v.add_argument("--dataset")
    v.add_argument("--steps", type=int)
    v.add_argument("--resume", help="checkpoint to continue from")
    v.set_defaults(fn=cmd_train_vae)

    d = sub.add_parser("train-diffusion", parents=[common], help="train the latent diffusion model")
    d.add_argument("--dataset")
    d.add_argument("--joint")
    d.add_argument("--mani")
    d.add_argument("--steps", type=int)
    d.add_argument("--resume")
    d.set_defaults(fn=cmd_train_diffusion)

    s = sub.add_parser("sample", parents=[common], help="generate one sequence")
    s.add_argument("--instruction")
    s.add_argument("--object", help="object JSON (default: random articulated object from the seed)")
    s.add_argument("--type", help="left, right or bimanual")
    s.add_argument("--joint")
    s.add_argument("--mani")
    s.add_argument("--diffusion")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("evaluate", parents=[common], help="metric report over sequence or dataset files")
    e.add_argument("sequences", nargs="+")
    e.add_argument("--reference", help="real reference dataset file")
    e.add_argument("--metrics", help=f"comma list from {','.join(METRIC_NAMES)} (default: all)")
    e.add_argument("--table", help="also write the metric row as CSV here")
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="compare temporal denoiser backbones")
    a.add_argument("--dataset")
    a.add_argument("--no-scaling", action="store_true", help="skip the wall-time scaling benchmark")
    a.set_defaults(fn=cmd_ablate)

    pl = sub.add_parser("plot", parents=[common], help="trajectory / joint-angle / contact plots")
    pl.add_argument("sequence")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        torch.set_num_threads(1)
        cfg = _config(args)
        print(args.fn(args, cfg))
    except HOIError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
