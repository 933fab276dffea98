"""Conditional VAE over the object articulation trajectory (long-horizon joint planning)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .core import MAX_FRAMES
from .errors import InvalidInput, InvalidLength, ShapeMismatch
from .layers import ResMLP, kl_standard_normal, reparameterize


@dataclass
class JointVAEConfig:
    latent_dim: int = 32
    hidden: int = 256
    depth: int = 2
    max_frames: int = MAX_FRAMES
    text_dim: int = 64
    obj_dim: int = 64
    lambda_elbo: float = 1.0
    lambda_rec: float = 1.0


@dataclass
class JointLatent:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor | None = None


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise InvalidInput("non-finite input")


class JointVAE(nn.Module):
    """Trajectories are zero-padded to ``max_frames``; a validity mask rides along the encoder input."""

    def __init__(self, cfg: JointVAEConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or JointVAEConfig()
        cond = cfg.obj_dim + cfg.text_dim
        self.encoder = ResMLP(2 * cfg.max_frames + cond, cfg.hidden, 2 * cfg.latent_dim, cfg.depth)
        self.decoder = ResMLP(cfg.latent_dim + cond + 1, cfg.hidden, cfg.max_frames, cfg.depth)

    def _pad(self, gamma: torch.Tensor):
        n = gamma.shape[-1]
        if not 1 <= n <= self.cfg.max_frames:
            raise InvalidLength(f"trajectory length {n} outside [1, {self.cfg.max_frames}]")
        pad = self.cfg.max_frames - n
        mask = torch.ones_like(gamma)
        return nn.functional.pad(gamma, (0, pad)), nn.functional.pad(mask, (0, pad))

    def encode(self, gamma, obj_feat, text_feat) -> JointLatent:
        g, m = self._pad(gamma)
        h = self.encoder(torch.cat([g, m, obj_feat, text_feat], dim=-1))
        mu, logvar = h.chunk(2, dim=-1)
        return JointLatent(mu, logvar)

    def decode_raw(self, z, obj_feat, text_feat, n: int) -> torch.Tensor:
        if not 1 <= n <= self.cfg.max_frames:
            raise InvalidLength(f"frame count {n} outside [1, {self.cfg.max_frames}]")
        frac = torch.full(z.shape[:-1] + (1,), n / self.cfg.max_frames, dtype=z.dtype)
        return self.decoder(torch.cat([z, obj_feat, text_feat, frac], dim=-1))[..., :n]

    def forward(self, gamma, obj_feat, text_feat, generator: torch.Generator | None = None):
        lat = self.encode(gamma, obj_feat, text_feat)
        lat.z = reparameterize(lat.mu, lat.logvar, generator)
        return self.decode_raw(lat.z, obj_feat, text_feat, gamma.shape[-1]), lat


def joint_encode(model: JointVAE, gamma, obj_feat, text_feat) -> JointLatent:
    gamma, obj_feat, text_feat = (torch.as_tensor(x, dtype=torch.get_default_dtype()) for x in (gamma, obj_feat, text_feat))
    _check_finite(gamma, obj_feat, text_feat)
    with torch.no_grad():
        return model.encode(gamma, obj_feat, text_feat)


def joint_decode(model: JointVAE, z, obj_feat, text_feat, n: int, limits: tuple[float, float]) -> torch.Tensor:
    """Decoded trajectory of exactly ``n`` frames, clamped to the joint limits."""
    z, obj_feat, text_feat = (torch.as_tensor(x, dtype=torch.get_default_dtype()) for x in (z, obj_feat, text_feat))
    _check_finite(z, obj_feat, text_feat)
    with torch.no_grad():
        return model.decode_raw(z, obj_feat, text_feat, n).clamp(limits[0], limits[1])


def jointvae_loss(gamma, gamma_hat, mu, logvar, lambda_elbo: float = 1.0, lambda_rec: float = 1.0):
    """Negative ELBO (unit-variance Gaussian NLL + KL) plus the squared-l2 trajectory term.

    Frame terms are summed, batch entries averaged. Returns ``(total, parts)``.
    """
    if gamma.shape != gamma_hat.shape:
        raise ShapeMismatch(f"gamma {tuple(gamma.shape)} vs gamma_hat {tuple(gamma_hat.shape)}")
    sq = (gamma - gamma_hat).pow(2).sum(-1)
    recon_nll = 0.5 * sq
    kl = kl_standard_normal(mu, logvar)
    elbo = recon_nll + kl
    total = lambda_elbo * elbo + lambda_rec * sq
    parts = {"recon_nll": recon_nll.mean(), "kl": kl.mean(), "elbo": elbo.mean(), "rec": sq.mean()}
    return total.mean(), parts
