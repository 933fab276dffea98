"""Temporal-denoiser ablation: same data, budget and seeds for every backbone."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import Dataset, record_from_sample
from .metrics import TABLE_COLUMNS, evaluate_sequences
from .ssm import Backbone, SSMConfig
from .training import Condition, generate, train_diffusion, train_jointvae, train_manivae

ROW_NAMES = {"gru": "GRU", "tconv": "TemporalConv", "attention": "Transformer", "ssm": "SSM"}


@dataclass
class AblationResult:
    rows: dict  # backbone -> MetricReport
    table: str


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def ablation_table(rows: dict) -> str:
    lines = ["denoiser," + ",".join(TABLE_COLUMNS)]
    for name, rep in rows.items():
        lines.append(ROW_NAMES.get(name, name) + "," + ",".join(_fmt(v) for v in rep.row()))
    return "\n".join(lines) + "\n"


def run_ablation(cfg: RunConfig, dataset: Dataset) -> AblationResult:
    ab = cfg.ablate
    joint = train_jointvae(cfg, dataset, steps=ab.vae_steps).model
    mani = train_manivae(cfg, dataset, steps=ab.vae_steps).model
    picks = dataset.samples[: ab.conditions]
    conditions = [Condition(s.obj, s.instruction, s.hand_type) for s in picks for _ in range(ab.samples_per_condition)]
    rows = {}
    for name in ab.backbones:
        run = copy.deepcopy(cfg)
        run.diffusion.ssm = SSMConfig(**{**vars(cfg.diffusion.ssm), "backbone": name})
        run.diffusion.steps = ab.sample_steps
        diff = train_diffusion(run, dataset, joint, mani, steps=ab.diffusion_steps).model.eval()
        records = generate(joint, mani, diff, conditions, ab.frames, cfg.seed)
        m = cfg.metrics
        rows[name] = evaluate_sequences(records, dataset_records(dataset), m.voxel_size, m.hand_radius, m.dt)
    return AblationResult(rows, ablation_table(rows))


def dataset_records(dataset: Dataset):
    return [record_from_sample(s) for s in dataset.samples]


def time_backbone(backbone: str, lengths, model_dim: int = 128, num_blocks: int = 1, repeats: int = 3,
                  seed: int = 0) -> list[float]:
    """Median forward wall time in seconds for each sequence length (batch 1, no grad)."""
    torch.manual_seed(seed)
    model = Backbone(SSMConfig(model_dim=model_dim, num_blocks=num_blocks, backbone=backbone)).eval()
    out = []
    with torch.no_grad():
        for L in lengths:
            x = torch.randn(1, L, model_dim)
            model(x)  # warm-up
            ts = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                model(x)
                ts.append(time.perf_counter() - t0)
            out.append(float(np.median(ts)))
    return out


def scaling_exponent(lengths, times) -> float:
    """Slope of log(time) against log(L)."""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def scaling_report(backbones, lengths, model_dim: int = 128) -> str:
    lines = ["backbone," + ",".join(f"ms@{L}" for L in lengths) + ",exponent"]
    for name in backbones:
        ts = time_backbone(name, lengths, model_dim)
        lines.append(name + "," + ",".join(f"{t * 1e3:.3f}" for t in ts) + f",{scaling_exponent(lengths, ts):.3f}")
    return "\n".join(lines) + "\n"


def write_ablation(result: AblationResult, out_dir, scaling: str | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "ablation.csv"}
    paths["table"].write_text(result.table)
    if scaling is not None:
        paths["scaling"] = out / "scaling.csv"
        paths["scaling"].write_text(scaling)
    return paths
