"""Frame-level conditional VAE over hand poses and its interaction-aware loss stack."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch
from torch import nn

from .core import IDENTITY_6D, NUM_JOINTS, HandType, rot6d_to_matrix_t
from .errors import InvalidConfig, InvalidInput, ShapeMismatch
from .geometry import SkeletalHandModel, distance_field_t, hand_fk_t, relative_rotation_t
from .layers import ResMLP, kl_standard_normal, reparameterize

OBJ_STATE_DIM = 10  # translation (3) + 6D rotation (6) + joint angle (1)
POSE_FLAT = 2 * NUM_JOINTS * 6


@dataclass
class ManiVAEConfig:
    latent_dim: int = 64
    hidden: int = 256
    depth: int = 2
    text_dim: int = 64
    obj_dim: int = 64


@dataclass
class LossWeights:
    elbo: float = 1.0
    mesh: float = 1.0
    dist: float = 1.0
    ro: float = 1.0
    kl: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise InvalidConfig(f"loss weight {f.name} must be >= 0, got {v}")


@dataclass
class ManiLatent:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor | None = None


@dataclass
class ManiBatch:
    """A batch of B frames. Hand axis order is (left, right)."""

    pose: torch.Tensor  # (B, 2, 16, 6)
    trans: torch.Tensor  # (B, 2, 3)
    obj_state: torch.Tensor  # (B, 10)
    obj_feat: torch.Tensor  # (B, d_o)
    text_feat: torch.Tensor  # (B, d_t)
    hand_type: torch.Tensor  # (B, 3) one-hot
    obj_points: torch.Tensor  # (B, V_o, 3) world space
    dist_gt: torch.Tensor  # (B, 2, V_h)

    @property
    def active(self) -> torch.Tensor:
        """(B, 2) mask of hands present under the type flag."""
        t = self.hand_type
        return torch.stack([t[:, 0] + t[:, 2], t[:, 1] + t[:, 2]], dim=-1)

    @property
    def obj_rot(self) -> torch.Tensor:
        return rot6d_to_matrix_t(self.obj_state[:, 3:9])

    def to(self, dtype) -> "ManiBatch":
        return ManiBatch(*(getattr(self, f.name).to(dtype) for f in fields(self)))

    def __getitem__(self, idx) -> "ManiBatch":
        return ManiBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


class ManiVAE(nn.Module):
    def __init__(self, cfg: ManiVAEConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ManiVAEConfig()
        cond = OBJ_STATE_DIM + cfg.obj_dim + cfg.text_dim + 3
        self.encoder = ResMLP(POSE_FLAT + 6 + cond, cfg.hidden, 2 * cfg.latent_dim, cfg.depth)
        self.decoder = ResMLP(cfg.latent_dim + cond, cfg.hidden, POSE_FLAT, cfg.depth)
        self.register_buffer("pose_offset", torch.tensor(IDENTITY_6D, dtype=torch.get_default_dtype()).repeat(2 * NUM_JOINTS))

    def encode(self, pose, trans, obj_state, obj_feat, text_feat, hand_type) -> ManiLatent:
        active = torch.stack([hand_type[..., 0] + hand_type[..., 2], hand_type[..., 1] + hand_type[..., 2]], -1)
        pose = pose * active[..., None, None]
        trans = trans * active[..., None]
        x = torch.cat([pose.flatten(-3), trans.flatten(-2), obj_state, obj_feat, text_feat, hand_type], dim=-1)
        mu, logvar = self.encoder(x).chunk(2, dim=-1)
        return ManiLatent(mu, logvar)

    def decode(self, z, obj_state, obj_feat, text_feat, hand_type) -> torch.Tensor:
        """Both hands' poses ``(..., 2, 16, 6)``; callers select the active block."""
        out = self.decoder(torch.cat([z, obj_state, obj_feat, text_feat, hand_type], dim=-1)) + self.pose_offset
        return out.unflatten(-1, (2, NUM_JOINTS, 6))

    def forward(self, batch: ManiBatch, generator: torch.Generator | None = None, sample: bool = True):
        lat = self.encode(batch.pose, batch.trans, batch.obj_state, batch.obj_feat, batch.text_feat, batch.hand_type)
        lat.z = reparameterize(lat.mu, lat.logvar, generator) if sample else lat.mu
        return self.decode(lat.z, batch.obj_state, batch.obj_feat, batch.text_feat, batch.hand_type), lat


def _type_tensor(hand_type) -> tuple[torch.Tensor, HandType]:
    if isinstance(hand_type, HandType):
        ht = hand_type
    else:
        t = torch.as_tensor(hand_type).detach().cpu().reshape(-1)
        ht = HandType.from_one_hot(t.numpy())
    return torch.tensor(ht.one_hot, dtype=torch.get_default_dtype()), ht


def mani_encode(model: ManiVAE, pose, trans, obj_state, obj_feat, text_feat, hand_type) -> ManiLatent:
    """Posterior parameters for one frame (``pose``: (2, 16, 6), ``trans``: (2, 3))."""
    onehot, _ = _type_tensor(hand_type)
    args = [torch.as_tensor(x, dtype=torch.get_default_dtype()) for x in (pose, trans, obj_state, obj_feat, text_feat)]
    if any(not torch.isfinite(a).all() for a in args):
        raise InvalidInput("non-finite input")
    with torch.no_grad():
        return model.encode(*args, onehot)


def mani_decode(model: ManiVAE, z, obj_state, obj_feat, text_feat, hand_type) -> torch.Tensor:
    """``(16, 6)`` for a single-hand flag, ``(2, 16, 6)`` (left, right) for bimanual."""
    onehot, ht = _type_tensor(hand_type)
    args = [torch.as_tensor(x, dtype=torch.get_default_dtype()) for x in (z, obj_state, obj_feat, text_feat)]
    if any(not torch.isfinite(a).all() for a in args):
        raise InvalidInput("non-finite input")
    with torch.no_grad():
        out = model.decode(*args, onehot)
    if not torch.isfinite(out).all():
        raise InvalidInput("decoder produced non-finite values")
    if ht is HandType.BIMANUAL:
        return out
    return out[..., int(ht), :, :]


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def mesh_loss(P_hat, P_gt, trans, hand_models: Sequence[SkeletalHandModel], trans_hat=None, active=None):
    """Mean over frames of summed squared point distances.

    ``P_*``: (N, H, 16, 6), ``trans``: (N, H, 3), one model per hand slot, ``active``: (N, H) weights.
    """
    _check_same(P_hat, P_gt, "pose")
    if trans.shape[:-1] != P_gt.shape[:-2] or len(hand_models) != P_gt.shape[1]:
        raise ShapeMismatch("translations / hand models do not match poses")
    trans_hat = trans if trans_hat is None else trans_hat
    total = P_hat.new_zeros(())
    for h, model in enumerate(hand_models):
        pred = hand_fk_t(P_hat[:, h], trans_hat[:, h], model)
        gt = hand_fk_t(P_gt[:, h], trans[:, h], model)
        per_frame = (pred - gt).pow(2).sum((-1, -2))
        if active is not None:
            per_frame = per_frame * active[:, h]
        total = total + per_frame.sum()
    return total / P_gt.shape[0]


def dist_loss(D_pred, D_gt, mask):
    """``(1/N) sum_i sum_h ||mask * (D - D*)||^2`` over fields of shape (N, H, V)."""
    _check_same(D_pred, D_gt, "distance field")
    _check_same(mask, D_gt, "mask")
    return (mask * (D_pred - D_gt)).pow(2).sum() / D_gt.shape[0]


def ro_loss(R_hand, R_obj, R_hand_gt, R_obj_gt, active=None):
    """Frobenius error between predicted and true object-frame hand rotations.

    ``R_hand*``: (N, H, 3, 3), ``R_obj*``: (N, 3, 3).
    """
    _check_same(R_hand, R_hand_gt, "hand rotations")
    _check_same(R_obj, R_obj_gt, "object rotations")
    rel = relative_rotation_t(R_hand, R_obj[:, None])
    rel_gt = relative_rotation_t(R_hand_gt, R_obj_gt[:, None])
    per = (rel - rel_gt).pow(2).sum((-1, -2))
    if active is not None:
        per = per * active
    return per.sum() / R_hand.shape[0]


def manivae_loss(batch: ManiBatch, P_hat, latent: ManiLatent, weights: LossWeights,
                 hand_models: Sequence[SkeletalHandModel], mask_eps: float = 0.0):
    """Weighted sum of the ELBO, mesh, distance-map, relative-orientation and KL terms."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    active = batch.active
    n = batch.pose.shape[0]
    recon_nll = 0.5 * ((P_hat - batch.pose).pow(2).sum((-1, -2)) * active).sum() / n
    kl = kl_standard_normal(latent.mu, latent.logvar).sum() / n
    elbo = recon_nll + kl
    mesh = mesh_loss(P_hat, batch.pose, batch.trans, hand_models, active=active)

    pts = torch.stack([hand_fk_t(P_hat[:, h], batch.trans[:, h], m) for h, m in enumerate(hand_models)], dim=1)
    D_pred = distance_field_t(pts, batch.obj_points[:, None])
    mask = (batch.dist_gt > mask_eps).to(P_hat.dtype) * active[..., None]
    dist = dist_loss(D_pred, batch.dist_gt, mask)

    R_obj = batch.obj_rot
    ro = ro_loss(rot6d_to_matrix_t(P_hat[:, :, 0]), R_obj, rot6d_to_matrix_t(batch.pose[:, :, 0]), R_obj, active)

    parts = {"elbo": elbo, "recon_nll": recon_nll, "mesh": mesh, "dist": dist, "ro": ro, "kl": kl}
    total = (weights.elbo * elbo + weights.mesh * mesh + weights.dist * dist
             + weights.ro * ro + weights.kl * kl)
    return total, parts
