"""Staged training and generation: the two VAEs first, then latent diffusion with both frozen.

All randomness for step ``k`` comes from a generator seeded by ``(seed, k)``, so a run
resumed from a checkpoint replays exactly the same batches and noise as an uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .config import RunConfig
from .core import HandType
from .data import Dataset, EmbeddingProvider, Sample, SequenceRecord, StubEmbedder, condition_hash
from .diffusion import (CompositeSequence, Denoiser, DiffusionConfig, NoiseSchedule, ancestral_sample, assemble_output,
                        cosine_schedule, train_step)
from .errors import ConfigError, DependencyError, InvalidLength, NumericalError, ShapeMismatch
from .geometry import ArticulatedObjectModel, articulate_object, default_hand_model
from .jointvae import JointVAE, JointVAEConfig, joint_decode, jointvae_loss
from .layers import freeze, is_frozen
from .manivae import ManiBatch, ManiVAE, ManiVAEConfig, mani_decode, manivae_loss
from .ssm import SSMConfig

DTYPE = torch.float32


def hand_models():
    return default_hand_model("left"), default_hand_model("right")


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(step)) % (2 ** 63))


def _pick(n: int, batch: int, gen: torch.Generator) -> torch.Tensor:
    if n <= batch:
        return torch.arange(n)
    return torch.randperm(n, generator=gen)[:batch].sort().values


class CSVLog:
    """Append-only CSV; floats are written with ``repr`` so logged values round-trip exactly."""

    def __init__(self, path, columns: Sequence[str]):
        self.path = Path(path) if path is not None else None
        self.columns = list(columns)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                with self.path.open("w", newline="") as f:
                    csv.writer(f).writerow(self.columns)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([repr(float(row[c])) if c != "step" else int(row[c]) for c in self.columns])


def read_log(path) -> list[dict]:
    with Path(path).open() as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


# ---------------------------------------------------------------- tensors from the dataset

@dataclass
class SequenceTensors:
    """Per-sequence conditioning and targets, stacked over a dataset (all sequences share N)."""

    gamma: torch.Tensor  # (S, N)
    text: torch.Tensor  # (S, d_t)
    obj: torch.Tensor  # (S, d_o)
    hand_type: torch.Tensor  # (S, 3)
    limits: list


def sequence_tensors(samples: Sequence[Sample], embedder: EmbeddingProvider) -> SequenceTensors:
    lengths = {s.sequence.N for s in samples}
    if len(lengths) != 1:
        raise ShapeMismatch(f"sequences have mixed frame counts {sorted(lengths)}")
    gamma = np.stack([[o.joint_angle for o in s.sequence.objects] for s in samples])
    text = np.stack([embedder.text(s.instruction) for s in samples])
    obj = np.stack([embedder.object(s.obj) for s in samples])
    ht = np.stack([s.hand_type.one_hot for s in samples])
    t = lambda a: torch.tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)
    return SequenceTensors(t(gamma), t(text), t(obj), t(ht), [s.obj.limits for s in samples])


def obj_state_vector(o) -> np.ndarray:
    return np.concatenate([o.trans, o.rot, [o.joint_angle]])


def build_mani_batch(samples: Sequence[Sample], embedder: EmbeddingProvider) -> ManiBatch:
    pose, trans, state, objf, textf, ht, pts, dist = [], [], [], [], [], [], [], []
    for s in samples:
        of, tf = embedder.object(s.obj), embedder.text(s.instruction)
        for i, (h, o) in enumerate(zip(s.sequence.hands, s.sequence.objects)):
            pose.append(np.stack([h.pose_left, h.pose_right]))
            trans.append(np.stack([h.trans_left, h.trans_right]))
            state.append(obj_state_vector(o))
            objf.append(of)
            textf.append(tf)
            ht.append(s.hand_type.one_hot)
            pts.append(articulate_object(s.obj, o))
            dist.append(s.dist[i])
    t = lambda a: torch.tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)
    return ManiBatch(t(pose), t(trans), t(state), t(objf), t(textf), t(ht), t(pts), t(dist))


# ---------------------------------------------------------------- checkpoint helpers

def _meta(kind: str, model_cfg, cfg: RunConfig, step: int, **extra) -> dict:
    meta = {"kind": kind, "model_config": dataclasses.asdict(model_cfg), "seed": cfg.seed, "step": step,
            "frozen": False, "run_config": dataclasses.asdict(cfg)}
    meta.update(extra)
    return meta


def _restore(path, kind: str, model: nn.Module, opt: torch.optim.Optimizer | None = None) -> dict:
    state, meta, optim = checkpoint.load(path)
    if meta.get("kind") != kind:
        raise DependencyError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    model.load_state_dict(state)
    if opt is not None and optim:
        checkpoint.load_optimizer(opt, optim, meta["optimizer"])
    return meta


def load_jointvae(path, frozen: bool = True) -> JointVAE:
    _, meta, _ = checkpoint.load(path)
    model = JointVAE(JointVAEConfig(**meta["model_config"]))
    _restore(path, "jointvae", model)
    return freeze(model) if frozen else model


def load_manivae(path, frozen: bool = True) -> ManiVAE:
    _, meta, _ = checkpoint.load(path)
    model = ManiVAE(ManiVAEConfig(**meta["model_config"]))
    _restore(path, "manivae", model)
    return freeze(model) if frozen else model


def _check_finite(loss: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"{what}: non-finite loss at step {step}", step=step)


@dataclass
class TrainResult:
    model: nn.Module
    history: list
    step: int
    checkpoint_hash: str | None = None


def _run_loop(model, opt, loss_fn, start: int, steps: int, seed: int, clip: float, log: CSVLog, what: str):
    history = []
    for step in range(start + 1, steps + 1):
        gen = step_generator(seed, step)
        opt.zero_grad(set_to_none=True)
        total, parts = loss_fn(gen)
        _check_finite(total, step, what)
        total.backward()
        if clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), clip)
        opt.step()
        row = {"step": step, "total": total.item(), **{k: v.item() for k, v in parts.items()}}
        history.append(row)
        log.write(row)
    return history


def train_jointvae(cfg: RunConfig, dataset: Dataset, steps: int | None = None, resume=None, ckpt_path=None,
                   log_path=None, embedder: EmbeddingProvider | None = None) -> TrainResult:
    embedder = embedder or StubEmbedder(cfg.jointvae.text_dim, cfg.jointvae.obj_dim)
    steps = cfg.train.vae_steps if steps is None else steps
    torch.manual_seed(cfg.seed)
    model = JointVAE(cfg.jointvae)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.vae_lr)
    start = 0
    if resume is not None:
        start = _restore(resume, "jointvae", model, opt)["step"]
    data = sequence_tensors(dataset.samples, embedder)
    jc = cfg.jointvae

    def loss_fn(gen):
        idx = _pick(data.gamma.shape[0], cfg.train.vae_batch, gen)
        g_hat, lat = model(data.gamma[idx], data.obj[idx], data.text[idx], generator=gen)
        return jointvae_loss(data.gamma[idx], g_hat, lat.mu, lat.logvar, jc.lambda_elbo, jc.lambda_rec)

    log = CSVLog(log_path, ["step", "total", "recon_nll", "kl", "elbo", "rec"])
    model.train()
    history = _run_loop(model, opt, loss_fn, start, steps, cfg.seed, cfg.train.grad_clip, log, "jointvae")
    digest = None
    if ckpt_path is not None:
        digest = checkpoint.save(ckpt_path, model, _meta("jointvae", jc, cfg, max(steps, start)), opt)
    return TrainResult(model, history, max(steps, start), digest)


def train_manivae(cfg: RunConfig, dataset: Dataset, steps: int | None = None, resume=None, ckpt_path=None,
                  log_path=None, embedder: EmbeddingProvider | None = None) -> TrainResult:
    embedder = embedder or StubEmbedder(cfg.manivae.text_dim, cfg.manivae.obj_dim)
    steps = cfg.train.vae_steps if steps is None else steps
    torch.manual_seed(cfg.seed)
    model = ManiVAE(cfg.manivae)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.vae_lr)
    start = 0
    if resume is not None:
        start = _restore(resume, "manivae", model, opt)["step"]
    batch = build_mani_batch(dataset.samples, embedder)
    models = hand_models()
    weights = cfg.loss_weights

    def loss_fn(gen):
        b = batch[_pick(batch.pose.shape[0], cfg.train.vae_batch, gen)]
        P_hat, lat = model(b, generator=gen)
        return manivae_loss(b, P_hat, lat, weights, models, cfg.mask_eps)

    log = CSVLog(log_path, ["step", "total", "elbo", "recon_nll", "mesh", "dist", "ro", "kl"])
    model.train()
    history = _run_loop(model, opt, loss_fn, start, steps, cfg.seed, cfg.train.grad_clip, log, "manivae")
    digest = None
    if ckpt_path is not None:
        digest = checkpoint.save(ckpt_path, model, _meta("manivae", cfg.manivae, cfg, max(steps, start),
                                                         loss_weights=dataclasses.asdict(weights)), opt)
    return TrainResult(model, history, max(steps, start), digest)


# ---------------------------------------------------------------- diffusion

class DiffusionModel(nn.Module):
    """Denoiser plus the per-channel normalisation of the composite sequence."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        self.denoiser = Denoiser(cfg)
        self.register_buffer("mean", torch.zeros(cfg.channels))
        self.register_buffer("std", torch.ones(cfg.channels))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


def diffusion_config_from_meta(meta: dict) -> DiffusionConfig:
    d = dict(meta["model_config"])
    d["ssm"] = SSMConfig(**d["ssm"])
    return DiffusionConfig(**d)


def load_diffusion(path) -> DiffusionModel:
    _, meta, _ = checkpoint.load(path)
    model = DiffusionModel(diffusion_config_from_meta(meta))
    _restore(path, "diffusion", model)
    return model.eval()


def encode_composites(mani: ManiVAE, samples: Sequence[Sample], embedder: EmbeddingProvider) -> torch.Tensor:
    """(S, N, C) composite sequences; the grasp latent is the frozen encoder's posterior mean."""
    out = []
    for s in samples:
        b = build_mani_batch([s], embedder)
        with torch.no_grad():
            z = mani.encode(b.pose, b.trans, b.obj_state, b.obj_feat, b.text_feat, b.hand_type).mu
        out.append(torch.cat([z, b.trans.flatten(-2), b.obj_state[:, :3], b.obj_state[:, 3:9]], dim=-1))
    lengths = {x.shape[0] for x in out}
    if len(lengths) != 1:
        raise ShapeMismatch(f"sequences have mixed frame counts {sorted(lengths)}")
    return torch.stack(out)


def schedule_for(cfg: DiffusionConfig) -> NoiseSchedule:
    return cosine_schedule(cfg.steps, cfg.cosine_s)


def train_diffusion(cfg: RunConfig, dataset: Dataset, joint: JointVAE, mani: ManiVAE, steps: int | None = None,
                    resume=None, ckpt_path=None, log_path=None, embedder: EmbeddingProvider | None = None,
                    freeze_vaes: bool = True, vae_hashes: dict | None = None) -> TrainResult:
    """Fit the noise predictor on frozen-ManiVAE composites; refuses trainable VAEs."""
    dcfg = cfg.diffusion
    embedder = embedder or StubEmbedder(dcfg.text_dim, dcfg.obj_dim)
    if mani.cfg.latent_dim != dcfg.latent_dim:
        raise ConfigError(f"diffusion latent_dim {dcfg.latent_dim} != ManiVAE latent_dim {mani.cfg.latent_dim}")
    if freeze_vaes:
        freeze(joint)
        freeze(mani)
    for vae in (joint, mani):
        if not is_frozen(vae):
            raise ConfigError(f"{type(vae).__name__} parameters must be frozen before diffusion training")
    steps = cfg.train.diffusion_steps if steps is None else steps
    torch.manual_seed(cfg.seed)
    model = DiffusionModel(dcfg)
    model.denoiser.zero_init_output()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.diffusion_lr)
    x0 = encode_composites(mani, dataset.samples, embedder)
    start = 0
    if resume is not None:
        start = _restore(resume, "diffusion", model, opt)["step"]
    else:
        with torch.no_grad():
            flat = x0.reshape(-1, x0.shape[-1])
            model.mean.copy_(flat.mean(0))
            model.std.copy_(flat.std(0, unbiased=False).clamp_min(cfg.train.std_floor))
    cond = sequence_tensors(dataset.samples, embedder)
    schedule = schedule_for(dcfg)
    xn = model.normalize(x0)

    def loss_fn(gen):
        idx = _pick(xn.shape[0], cfg.train.diffusion_batch, gen)
        loss = train_step(model.denoiser, schedule, xn[idx], cond.text[idx], cond.obj[idx], cond.hand_type[idx],
                          cond.gamma[idx], generator=gen, frozen=(joint, mani))
        return loss, {}

    log = CSVLog(log_path, ["step", "total"])
    model.train()
    history = _run_loop(model, opt, loss_fn, start, steps, cfg.seed, cfg.train.grad_clip, log, "diffusion")
    digest = None
    if ckpt_path is not None:
        meta = _meta("diffusion", dcfg, cfg, max(steps, start), backbone=dcfg.ssm.backbone,
                     vae_frozen=True, vae_checkpoints=vae_hashes or {})
        digest = checkpoint.save(ckpt_path, model, meta, opt)
    return TrainResult(model, history, max(steps, start), digest)


# ---------------------------------------------------------------- generation

@dataclass
class Condition:
    obj: ArticulatedObjectModel
    instruction: str
    hand_type: HandType


def generate(joint: JointVAE, mani: ManiVAE, diff: DiffusionModel, conditions: Sequence[Condition], n: int,
             seed: int, embedder: EmbeddingProvider | None = None) -> list[SequenceRecord]:
    """One reverse chain over a batch of conditions: JointVAE prior -> diffusion -> assembly."""
    dcfg = diff.cfg
    if not 1 <= n <= min(dcfg.max_frames, joint.cfg.max_frames):
        raise InvalidLength(f"frame count {n} outside [1, {dcfg.max_frames}]")
    embedder = embedder or StubEmbedder(dcfg.text_dim, dcfg.obj_dim)
    gen = torch.Generator().manual_seed(int(seed))
    t = lambda a: torch.tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)
    text = [embedder.text(c.instruction) for c in conditions]
    objf = [embedder.object(c.obj) for c in conditions]
    B = len(conditions)
    zJ = torch.randn((B, joint.cfg.latent_dim), generator=gen, dtype=DTYPE)
    gammas = torch.stack([joint_decode(joint, zJ[b], t(objf[b]), t(text[b]), n, conditions[b].obj.limits)
                          for b in range(B)])
    text_t, obj_t = t(np.stack(text)), t(np.stack(objf))
    type_t = t(np.stack([c.hand_type.one_hot for c in conditions]))
    schedule = schedule_for(dcfg)

    def eps_fn(x_t, tt):
        with torch.no_grad():
            return diff.denoiser(x_t, tt, text_t, obj_t, type_t, gammas)

    x = ancestral_sample(eps_fn, schedule, (B, n, dcfg.channels), gen, dtype=DTYPE)
    x = diff.denormalize(x).double().numpy()
    records = []
    for b, c in enumerate(conditions):
        comp = CompositeSequence.from_array(x[b], dcfg.latent_dim)

        def decode_pose(z, obj_state, b=b, c=c):
            return mani_decode(mani, t(z), t(obj_state), t(objf[b]), t(text[b]), c.hand_type).double().numpy()

        gamma = np.clip(gammas[b].double().numpy(), *c.obj.limits)  # float32 clamp can round past the limit
        seq = assemble_output(comp, gamma, decode_pose, c.hand_type, c.obj.limits)
        records.append(SequenceRecord(seq, c.obj, c.hand_type, c.instruction, int(seed),
                                      condition_hash(text[b]), condition_hash(objf[b])))
    return records


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    w = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(w) / w, mode="valid")


def loss_ratio(history: list, key: str = "total", window: int = 1) -> float:
    vals = [h[key] for h in history]
    return float(np.mean(vals[-window:]) / vals[0]) if vals and vals[0] != 0 else math.nan
