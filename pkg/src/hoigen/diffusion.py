"""Latent diffusion over the composite per-frame sequence ``{z^M, T, O^alpha, O^beta}``."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .core import MAX_FRAMES, HandState, HandType, MotionSequence, ObjectState, canonicalize_rot6d, IDENTITY_6D, NUM_JOINTS
from .errors import AssemblyError, ConfigError, HOIError, InvalidTimestep, NumericalError, ShapeMismatch
from .layers import is_frozen
from .ssm import Backbone, SSMConfig

NUM_AGENTS = 4


@dataclass
class DiffusionConfig:
    latent_dim: int = 64
    text_dim: int = 64
    obj_dim: int = 64
    max_frames: int = MAX_FRAMES
    steps: int = 1000
    cosine_s: float = 0.008
    ssm: SSMConfig = field(default_factory=SSMConfig)

    @property
    def agent_dims(self) -> tuple[int, int, int, int]:
        return (self.latent_dim, 6, 3, 6)

    @property
    def channels(self) -> int:
        return sum(self.agent_dims)


@dataclass
class NoiseSchedule:
    """Arrays are indexed by timestep 0..T; ``betas[0]`` is an unused 0 placeholder."""

    steps: int
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def posterior_var(self) -> np.ndarray:
        """``beta_t (1 - abar_{t-1}) / (1 - abar_t)``; 0 at t = 0 and t = 1."""
        v = np.zeros(self.steps + 1)
        ab = self.alpha_bar
        v[1:] = self.betas[1:] * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        return v


def cosine_schedule(steps: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine schedule; ``alpha_bar`` is re-accumulated from the clipped betas."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t = np.arange(steps + 1, dtype=np.float64)
    f = np.cos(((t / steps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    betas = np.zeros(steps + 1)
    betas[1:] = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(steps, betas, alpha_bar)


def _check_t(t, schedule: NoiseSchedule):
    arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(arr < 1) or np.any(arr > schedule.steps) or np.any(arr != np.round(arr)):
        raise InvalidTimestep(f"timestep(s) {arr} outside 1..{schedule.steps}")


def forward_noise(x0, t, eta, schedule: NoiseSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eta``; ``t`` is an int or a (B,) batch of ints."""
    _check_t(t, schedule)
    if eta.shape != x0.shape:
        raise ShapeMismatch(f"noise {tuple(eta.shape)} vs x0 {tuple(x0.shape)}")
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[torch.as_tensor(t)]
        ab = ab.reshape(ab.shape + (1,) * (x0.dim() - ab.dim()))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eta
    ab = schedule.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x0) - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eta


def sinusoidal(positions: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    ang = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([ang.sin(), ang.cos()], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype())


@dataclass
class CompositeSequence:
    z: np.ndarray  # (N, d_M)
    trans: np.ndarray  # (N, 6) left then right wrist translation
    obj_trans: np.ndarray  # (N, 3)
    obj_rot: np.ndarray  # (N, 6)

    def __post_init__(self):
        n = self.z.shape[0]
        if not (self.trans.shape == (n, 6) and self.obj_trans.shape == (n, 3) and self.obj_rot.shape == (n, 6)):
            raise ShapeMismatch("composite channels disagree on frame count or width")
        if not 1 <= n <= MAX_FRAMES:
            raise ShapeMismatch(f"composite length {n} outside [1, {MAX_FRAMES}]")

    @property
    def N(self) -> int:
        return self.z.shape[0]

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.z, self.trans, self.obj_trans, self.obj_rot], axis=-1)

    @classmethod
    def from_array(cls, x, latent_dim: int) -> "CompositeSequence":
        x = np.asarray(x, dtype=np.float64)
        d = latent_dim
        return cls(x[:, :d], x[:, d:d + 6], x[:, d + 6:d + 9], x[:, d + 9:d + 15])


@dataclass
class ConditionBundle:
    t_embed: torch.Tensor
    text_embed: torch.Tensor
    obj_embed: torch.Tensor
    type_embed: torch.Tensor
    c: torch.Tensor
    gamma_prior: torch.Tensor | None = None


class Denoiser(nn.Module):
    """Noise predictor: agent projections, positional encodings, additive conditions, backbone."""

    def __init__(self, cfg: DiffusionConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiffusionConfig()
        d = cfg.ssm.model_dim
        self.in_proj = nn.ModuleList([nn.Linear(a, d) for a in cfg.agent_dims])
        self.frame_pe = nn.Parameter(sinusoidal(torch.arange(cfg.max_frames), d))
        self.agent_pe = nn.Parameter(sinusoidal(torch.arange(NUM_AGENTS) * 7.0 + 0.5, d, base=100.0))
        self.t_embed = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.text_embed = nn.Linear(cfg.text_dim, d)
        self.obj_embed = nn.Linear(cfg.obj_dim, d)
        self.type_embed = nn.Linear(3, d, bias=False)
        self.gamma_embed = nn.Linear(1, d)
        self.backbone = Backbone(cfg.ssm)
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.ModuleList([nn.Linear(d, a) for a in cfg.agent_dims])

    def zero_init_output(self) -> "Denoiser":
        for p in self.out_proj:
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)
        return self

    def positional_encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Add frame-wise and agent-wise encodings to frame-major ``(..., N*4, d)`` tokens."""
        if tokens.shape[-2] % NUM_AGENTS:
            raise ShapeMismatch(f"token count {tokens.shape[-2]} not divisible by {NUM_AGENTS} agents")
        n = tokens.shape[-2] // NUM_AGENTS
        if n > self.cfg.max_frames:
            raise ShapeMismatch(f"{n} frames exceeds max_frames={self.cfg.max_frames}")
        grid = tokens.unflatten(-2, (n, NUM_AGENTS))
        grid = grid + self.frame_pe[:n, None, :] + self.agent_pe[None, :, :]
        return grid.flatten(-3, -2)

    def fuse_conditions(self, t, text_feat, obj_feat, hand_type) -> ConditionBundle:
        te = self.t_embed(sinusoidal(torch.as_tensor(t), self.cfg.ssm.model_dim))
        xe = self.text_embed(text_feat)
        oe = self.obj_embed(obj_feat)
        ye = self.type_embed(hand_type)
        return ConditionBundle(te, xe, oe, ye, te + xe + oe + ye)

    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        parts = x.split(self.cfg.agent_dims, dim=-1)
        return torch.stack([p(v) for p, v in zip(self.in_proj, parts)], dim=-2).flatten(-3, -2)

    def forward(self, x_t, t, text_feat, obj_feat, hand_type, gamma, reference: bool = False):
        """``x_t``: (B, N, C); ``t``: (B,); ``gamma``: (B, N). Returns predicted noise (B, N, C)."""
        n = x_t.shape[-2]
        cond = self.fuse_conditions(t, text_feat, obj_feat, hand_type)
        tokens = self.positional_encode(self.tokenize(x_t))
        tokens = tokens + cond.c[:, None, :]
        g = self.gamma_embed(gamma[..., None])  # (B, N, d)
        tokens = tokens + g.repeat_interleave(NUM_AGENTS, dim=-2)
        h = self.backbone(tokens, reference=reference).unflatten(-2, (n, NUM_AGENTS))
        h = self.out_norm(h)
        out = torch.cat([p(h[..., a, :]) for a, p in enumerate(self.out_proj)], dim=-1)
        if not torch.isfinite(out).all():
            raise NumericalError("denoiser produced non-finite output")
        return out


EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def noise_prediction_loss(eps_fn: EpsFn, schedule: NoiseSchedule, x0: torch.Tensor,
                          generator: torch.Generator | None = None) -> torch.Tensor:
    """MSE between drawn noise and the prediction at a uniformly drawn t in 1..T (one t per batch row)."""
    b = x0.shape[0]
    t = torch.randint(1, schedule.steps + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_noise(x0, t, eps, schedule)
    return (eps - eps_fn(x_t, t)).pow(2).mean()


def train_step(model: Denoiser, schedule: NoiseSchedule, x0, text_feat, obj_feat, hand_type, gamma,
               generator: torch.Generator | None = None, frozen: tuple[nn.Module, ...] = ()) -> torch.Tensor:
    """Noise-prediction loss for one batch; refuses to run if any VAE in ``frozen`` is trainable."""
    for vae in frozen:
        if not is_frozen(vae):
            raise ConfigError(f"{type(vae).__name__} parameters must be frozen before diffusion training")
    return noise_prediction_loss(
        lambda x_t, t: model(x_t, t, text_feat, obj_feat, hand_type, gamma), schedule, x0, generator)


def ancestral_sample(eps_fn: EpsFn, schedule: NoiseSchedule, shape, generator: torch.Generator | None = None,
                     deterministic: bool = False, x_T: torch.Tensor | None = None,
                     dtype=None) -> torch.Tensor:
    """DDPM reverse chain from ``x_T ~ N(0, I)``; ``deterministic`` sets sigma_t = 0."""
    dtype = dtype or torch.get_default_dtype()
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T.to(dtype)
    betas = torch.as_tensor(schedule.betas, dtype=dtype)
    abar = torch.as_tensor(schedule.alpha_bar, dtype=dtype)
    sigma = torch.as_tensor(schedule.posterior_var, dtype=dtype).sqrt()
    b = shape[0]
    for t in range(schedule.steps, 0, -1):
        tt = torch.full((b,), t, dtype=torch.long)
        try:
            eps = eps_fn(x, tt)
        except NumericalError as exc:
            raise NumericalError(f"non-finite denoiser output at step {t}", step=t) from exc
        x = (x - betas[t] / (1.0 - abar[t]).sqrt() * eps) / (1.0 - betas[t]).sqrt()
        if t > 1 and not deterministic:
            x = x + sigma[t] * torch.randn(shape, generator=generator, dtype=dtype)
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite sample at step {t}", step=t)
    return x


def assemble_output(composite: CompositeSequence, gamma_hat, decode_pose: Callable[[np.ndarray, np.ndarray], np.ndarray],
                    hand_type: HandType, limits: tuple[float, float]) -> MotionSequence:
    """Combine decoded per-frame hand poses with the global channels into a MotionSequence.

    ``decode_pose(z_i, obj_state_i)`` returns the active hands' pose block; object and hand
    rotations are projected onto valid 6D values, the joint angle is taken from ``gamma_hat``.
    """
    gamma_hat = np.asarray(gamma_hat, dtype=np.float64).reshape(-1)
    if gamma_hat.shape[0] != composite.N:
        raise AssemblyError(f"gamma has {gamma_hat.shape[0]} frames, composite {composite.N}")
    rest = np.tile(IDENTITY_6D, (NUM_JOINTS, 1))
    hands, objects = [], []
    try:
        for i in range(composite.N):
            rot = canonicalize_rot6d(composite.obj_rot[i])
            obj_state = np.concatenate([composite.obj_trans[i], rot, [gamma_hat[i]]])
            block = np.asarray(decode_pose(composite.z[i], obj_state), dtype=np.float64)
            if hand_type is HandType.BIMANUAL:
                pose_l, pose_r = canonicalize_rot6d(block[0]), canonicalize_rot6d(block[1])
            elif hand_type is HandType.LEFT:
                pose_l, pose_r = canonicalize_rot6d(block), rest
            else:
                pose_l, pose_r = rest, canonicalize_rot6d(block)
            hands.append(HandState(composite.trans[i, :3], composite.trans[i, 3:], pose_l, pose_r))
            objects.append(ObjectState(composite.obj_trans[i], rot, gamma_hat[i]))
        seq = MotionSequence(tuple(hands), tuple(objects))
        seq.validate(limits)
    except HOIError as exc:
        raise AssemblyError(f"assembled sequence violates invariants: {exc}") from exc
    return seq
