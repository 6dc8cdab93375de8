"""Flow-matching latent diffusion: linear trajectories, the velocity-matching
objective, a transformer velocity network with adaptive-norm conditioning,
and the explicit Euler sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class SamplerConfig:
    """Number of Euler steps; the step size is always 1/steps."""

    steps: int = 50

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """Linear trajectory point (1 - t) * z0 + t * z1."""
    if z0.shape != z1.shape:
        raise ValueError("z0 and z1 must have the same shape")
    t = torch.as_tensor(t, dtype=z0.dtype, device=z0.device)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    while t.dim() < z0.dim():
        t = t.unsqueeze(-1)
    return (1.0 - t) * z0 + t * z1


class TimeEmbedding(nn.Module):
    """Sinusoidal features of t followed by a small MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
        )
        args = t[:, None] * freqs[None] * 1000.0
        return self.mlp(torch.cat([torch.cos(args), torch.sin(args)], dim=-1))


class AdaLNBlock(nn.Module):
    """Transformer block whose norms are modulated by the conditioning vector."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(hidden, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(hidden, 4 * hidden), nn.GELU(), nn.Linear(4 * hidden, hidden))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(c).chunk(6, dim=-1)
        h = self.norm1(x) * (1 + scale_a[:, None]) + shift_a[:, None]
        x = x + gate_a[:, None] * self.attn(h, h, h, need_weights=False)[0]
        h = self.norm2(x) * (1 + scale_m[:, None]) + shift_m[:, None]
        return x + gate_m[:, None] * self.mlp(h)


class VelocityModel(nn.Module):
    """Velocity field over the latent space, conditioned on time and cond.

    The flat latent is split into ``latent_dim / patch_size`` tokens of width
    ``patch_size``, linearly embedded, offset by learnable positional
    embeddings, then processed by adaptive-norm transformer blocks driven by
    the sum of the time embedding and the projected condition vector.
    """

    def __init__(
        self,
        latent_dim: int = 128,
        cond_dim: int = 512,
        depth: int = 12,
        hidden: int = 512,
        heads: int = 16,
        patch_size: int = 1,
    ):
        super().__init__()
        if latent_dim % patch_size != 0:
            raise ValueError("latent_dim must be divisible by patch_size")
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.patch_size = patch_size
        self.n_tokens = latent_dim // patch_size
        self.token_embed = nn.Linear(patch_size, hidden)
        self.pos_embed = nn.Parameter(torch.zeros(self.n_tokens, hidden))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.time_embed = TimeEmbedding(hidden)
        self.cond_proj = nn.Linear(cond_dim, hidden)
        self.blocks = nn.ModuleList(AdaLNBlock(hidden, heads) for _ in range(depth))
        self.final_norm = nn.LayerNorm(hidden, elementwise_affine=False)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        self.head = nn.Linear(hidden, patch_size)
        nn.init.zeros_(self.final_modulation[1].weight)
        nn.init.zeros_(self.final_modulation[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self, z_t: torch.Tensor, t: torch.Tensor | float, cond: torch.Tensor
    ) -> torch.Tensor:
        if z_t.dim() != 2 or z_t.shape[-1] != self.latent_dim:
            raise ValueError(f"z_t must be (B, {self.latent_dim}), got {tuple(z_t.shape)}")
        if cond.shape != (z_t.shape[0], self.cond_dim):
            raise ValueError(f"cond must be (B, {self.cond_dim}), got {tuple(cond.shape)}")
        b = z_t.shape[0]
        t = torch.as_tensor(t, dtype=z_t.dtype, device=z_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        x = self.token_embed(z_t.view(b, self.n_tokens, self.patch_size)) + self.pos_embed
        c = self.time_embed(t) + self.cond_proj(cond)
        for block in self.blocks:
            x = block(x, c)
        shift, scale = self.final_modulation(c).chunk(2, dim=-1)
        x = self.final_norm(x) * (1 + scale[:, None]) + shift[:, None]
        return self.head(x).view(b, self.latent_dim)


def fm_loss(
    z1: torch.Tensor,
    cond: torch.Tensor,
    model,
    generator: torch.Generator | None = None,
    z0: torch.Tensor | None = None,
    t: torch.Tensor | None = None,
) -> torch.Tensor:
    """Velocity-matching objective: mean over the batch of
    ``|| (z1 - z0) - model(z_t, t, cond) ||^2`` with z0 ~ N(0, I), t ~ U[0, 1].

    ``z0`` and ``t`` may be supplied explicitly (tests, reproducibility).
    """
    if z1.dim() != 2:
        raise ValueError(f"z1 must be (B, Z), got {tuple(z1.shape)}")
    if z0 is None:
        z0 = torch.empty_like(z1).normal_(generator=generator)
    if t is None:
        t = torch.empty(z1.shape[0], dtype=z1.dtype, device=z1.device).uniform_(generator=generator)
    z_t = interpolate(z0, z1, t)
    pred = model(z_t, t, cond)
    if pred.shape != z1.shape:
        raise ValueError("model output dimension must equal the latent dimension")
    loss = ((z1 - z0) - pred).pow(2).sum(dim=-1).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("flow-matching loss is not finite")
    return loss


def euler_sample(
    z0: torch.Tensor, cond: torch.Tensor, model, config: SamplerConfig
) -> torch.Tensor:
    """Integrate the velocity field from t=0 to t=1 with explicit Euler steps."""
    z = z0
    dt = config.dt
    for i in range(config.steps):
        v = model(z, i * dt, cond)
        z = z + dt * v
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"non-finite state at Euler step {i}")
    return z
