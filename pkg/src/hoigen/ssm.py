"""Temporal denoiser backbones: a diagonal selective state-space stack and the GRU /
temporal-convolution / attention baselines, all behind one ``(B, L, d) -> (B, L, d)`` interface.

Recurrence (per channel c, state size n)::

    h_t[c] = A_t[c] * h_{t-1}[c] + B_t * x_t[c]
    y_t[c] = C_t . h_t[c]

with ``A_t = exp(-softplus(a(x_t)))`` in (0, 1) and ``B_t``, ``C_t`` linear in ``x_t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidConfig

BACKBONES = ("ssm", "gru", "tconv", "attention")
MIN_LOG_A = -4.0  # per-step decay floor, A_t >= e^-4
MAX_LOG_A = -1e-4  # keeps A_t < 1 in float32
MAX_CHUNK = 16  # exp(-MIN_LOG_A * (MAX_CHUNK - 1)) stays well inside float32 range


@dataclass
class SSMConfig:
    model_dim: int = 128
    state_dim: int = 16
    num_blocks: int = 8
    backbone: str = "ssm"
    causal: bool = False
    chunk: int = 16
    mlp_ratio: int = 2
    heads: int = 4
    kernel: int = 5

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise InvalidConfig(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        for name in ("model_dim", "state_dim", "num_blocks", "chunk", "mlp_ratio", "heads", "kernel"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.chunk > MAX_CHUNK:
            raise InvalidConfig(f"chunk must be <= {MAX_CHUNK}")
        if self.backbone == "attention" and self.model_dim % self.heads:
            raise InvalidConfig("model_dim must be divisible by heads")


def ssm_step(h_prev, x_t, A_t, B_t, C_t):
    """One recurrence step. ``h_prev``: (..., d, n); ``x_t``, ``A_t``: (..., d); ``B_t``, ``C_t``: (..., n)."""
    h_t = A_t[..., :, None] * h_prev + x_t[..., :, None] * B_t[..., None, :]
    y_t = (h_t * C_t[..., None, :]).sum(-1)
    return h_t, y_t


def scan_sequential(x, log_a, B, C, h0=None):
    """Reference scan: ``ssm_step`` applied frame by frame. Returns ``(y, h_last)``."""
    b, L, d = x.shape
    h = x.new_zeros(b, d, B.shape[-1]) if h0 is None else h0
    A = log_a.exp()
    ys = []
    for t in range(L):
        h, y = ssm_step(h, x[:, t], A[:, t], B[:, t], C[:, t])
        ys.append(y)
    return torch.stack(ys, dim=1), h


def scan_chunked(x, log_a, B, C, h0=None, chunk: int = 16):
    """Chunk-parallel evaluation of the same recurrence; linear in L for fixed ``chunk``.

    Within a chunk the decay ``exp(cum_t - cum_s)`` is factored around the chunk's
    first frame so the intra-chunk sum becomes one masked batched matmul. The
    reference never lies after ``t``, so causality holds bit-exactly. Requires
    ``log_a >= MIN_LOG_A`` and ``chunk <= MAX_CHUNK`` to keep both factors finite.
    """
    if not 1 <= chunk <= MAX_CHUNK:
        raise InvalidConfig(f"chunk must be in [1, {MAX_CHUNK}]")
    b, L, d = x.shape
    n = B.shape[-1]
    pad = (-L) % chunk
    if pad:
        x = F.pad(x, (0, 0, 0, pad))
        log_a = F.pad(log_a, (0, 0, 0, pad))
        B = F.pad(B, (0, 0, 0, pad))
        C = F.pad(C, (0, 0, 0, pad))
    nc = x.shape[1] // chunk
    x = x.view(b, nc, chunk, d)
    B = B.view(b, nc, chunk, n)
    C = C.view(b, nc, chunk, n)
    cum = log_a.view(b, nc, chunk, d).cumsum(dim=2)
    ref = cum[:, :, :1, :]

    causal = torch.ones(chunk, chunk, dtype=x.dtype, device=x.device).tril()
    G = (C @ B.transpose(-1, -2)) * causal  # (b, nc, t, s)
    y = (cum - ref).exp() * (G @ ((ref - cum).exp() * x))

    # contribution of each chunk's inputs to the state at its end
    tail = (cum[:, :, -1:, :] - cum).exp() * x  # (b, nc, s, d)
    S = tail.transpose(-1, -2) @ B  # (b, nc, d, n)
    decay = cum[:, :, -1, :].exp()
    h = x.new_zeros(b, d, n) if h0 is None else h0
    starts = []
    for c in range(nc):
        starts.append(h)
        h = decay[:, c, :, None] * h + S[:, c]
    H = torch.stack(starts, dim=1)  # (b, nc, d, n)
    y = y + cum.exp() * (C @ H.transpose(-1, -2))
    return y.reshape(b, nc * chunk, d)[:, :L], h


class SelectiveScan(nn.Module):
    """Single-direction selective SSM with input-dependent gates."""

    def __init__(self, dim: int, state_dim: int, chunk: int = 16):
        super().__init__()
        self.chunk = chunk
        self.a_proj = nn.Linear(dim, dim)
        self.B_proj = nn.Linear(dim, state_dim)
        self.C_proj = nn.Linear(dim, state_dim)
        self.D = nn.Parameter(torch.ones(dim))
        with torch.no_grad():
            # spread per-channel decay rates so some channels keep long memory
            rates = torch.exp(torch.linspace(math.log(1e-3), math.log(0.5), dim))
            self.a_proj.bias.copy_(torch.log(torch.expm1(rates)))
            self.a_proj.weight.mul_(0.1)

    def gates(self, x):
        log_a = -F.softplus(self.a_proj(x)).clamp(min=-MAX_LOG_A, max=-MIN_LOG_A)
        return log_a, self.B_proj(x), self.C_proj(x)

    def forward(self, x, reference: bool = False):
        log_a, B, C = self.gates(x)
        scan = scan_sequential if reference else scan_chunked
        y, _ = scan(x, log_a, B, C) if reference else scan(x, log_a, B, C, chunk=self.chunk)
        return y + self.D * x


class SSMMixer(nn.Module):
    def __init__(self, cfg: SSMConfig):
        super().__init__()
        self.fwd = SelectiveScan(cfg.model_dim, cfg.state_dim, cfg.chunk)
        self.bwd = None if cfg.causal else SelectiveScan(cfg.model_dim, cfg.state_dim, cfg.chunk)

    def forward(self, x, reference: bool = False):
        y = self.fwd(x, reference)
        if self.bwd is not None:
            y = y + self.bwd(x.flip(1), reference).flip(1)
        return y


class GRUMixer(nn.Module):
    def __init__(self, cfg: SSMConfig):
        super().__init__()
        bidir = not cfg.causal
        hidden = cfg.model_dim // 2 if bidir else cfg.model_dim
        self.rnn = nn.GRU(cfg.model_dim, hidden, batch_first=True, bidirectional=bidir)
        self.proj = nn.Linear(2 * hidden if bidir else hidden, cfg.model_dim)

    def forward(self, x):
        return self.proj(self.rnn(x)[0])


class TConvMixer(nn.Module):
    def __init__(self, cfg: SSMConfig):
        super().__init__()
        self.causal = cfg.causal
        self.k = cfg.kernel
        self.dw = nn.Conv1d(cfg.model_dim, cfg.model_dim, cfg.kernel, groups=cfg.model_dim)
        self.pw = nn.Linear(cfg.model_dim, cfg.model_dim)

    def forward(self, x):
        h = x.transpose(1, 2)
        pad = (self.k - 1, 0) if self.causal else ((self.k - 1) // 2, self.k // 2)
        h = self.dw(F.pad(h, pad)).transpose(1, 2)
        return self.pw(F.silu(h))


class AttentionMixer(nn.Module):
    """Explicit softmax attention; the full L x L score matrix is materialised."""

    def __init__(self, cfg: SSMConfig):
        super().__init__()
        self.heads = cfg.heads
        self.causal = cfg.causal
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim)
        self.proj = nn.Linear(cfg.model_dim, cfg.model_dim)

    def forward(self, x):
        b, L, d = x.shape
        q, k, v = self.qkv(x).view(b, L, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if self.causal:
            mask = torch.ones(L, L, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, -math.inf)
        out = scores.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, L, d))


MIXERS = {"ssm": SSMMixer, "gru": GRUMixer, "tconv": TConvMixer, "attention": AttentionMixer}


class Block(nn.Module):
    """``x + out(gated_mlp(mixer(norm(x))))``."""

    def __init__(self, cfg: SSMConfig):
        super().__init__()
        d = cfg.model_dim
        self.norm = nn.LayerNorm(d)
        self.mixer = MIXERS[cfg.backbone](cfg)
        self.gate = nn.Linear(d, cfg.mlp_ratio * d)
        self.value = nn.Linear(d, cfg.mlp_ratio * d)
        self.out = nn.Linear(cfg.mlp_ratio * d, d)

    def forward(self, x, **kw):
        m = self.mixer(self.norm(x), **kw)
        return x + self.out(F.silu(self.gate(m)) * self.value(m))


class Backbone(nn.Module):
    def __init__(self, cfg: SSMConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SSMConfig()
        if cfg.backbone not in MIXERS:
            raise InvalidConfig(f"unknown backbone {cfg.backbone!r}")
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.num_blocks)])

    def zero_init(self) -> "Backbone":
        for blk in self.blocks:
            nn.init.zeros_(blk.out.weight)
            nn.init.zeros_(blk.out.bias)
        return self

    def forward(self, tokens, reference: bool = False):
        kw = {"reference": reference} if self.cfg.backbone == "ssm" else {}
        for blk in self.blocks:
            tokens = blk(tokens, **kw)
        return tokens


def backbone_forward(tokens, cfg: SSMConfig, model: Backbone | None = None):
    """Run ``tokens`` (L, d) or (B, L, d) through a backbone built from ``cfg`` (or the given one)."""
    model = model if model is not None else Backbone(cfg)
    squeeze = tokens.dim() == 2
    out = model(tokens[None] if squeeze else tokens)
    return out[0] if squeeze else out
