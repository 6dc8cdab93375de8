"""Function autoencoder: latent encoder over (position, occupancy) pairs and a
pointwise occupancy decoder, plus the first-stage multi-task loss."""

from __future__ import annotations

import torch
import torch.nn as nn

from .pointenc import chamfer_l2

PROB_EPS = 1e-7  # keeps log() finite in float32 without moving 0.5


def _check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations after {stage}")
    return x


class LatentEncoder(nn.Module):
    """(positions, values, cond) -> global latent code.

    Per-query embeddings of (position, value) pairs go through a linear stack,
    are pooled over the query axis (mean by default), fused with the condition
    vector, and projected to the latent dimension.  Occupancy values are
    mapped to {-1, +1} before embedding unless ``signed_values`` is off.
    """

    def __init__(
        self,
        latent_dim: int = 128,
        cond_dim: int = 512,
        hidden: int = 128,
        layers: int = 3,
        pool: str = "mean",
        signed_values: bool = True,
    ):
        super().__init__()
        if pool not in ("mean", "max"):
            raise ValueError("pool must be 'mean' or 'max'")
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.pool = pool
        self.signed_values = signed_values
        stack: list[nn.Module] = [nn.Linear(4, hidden), nn.ReLU()]
        for _ in range(layers - 1):
            stack += [nn.Linear(hidden, hidden), nn.ReLU()]
        self.point_mlp = nn.Sequential(*stack)
        self.fuse = nn.Linear(hidden + cond_dim, latent_dim)

    def forward(
        self, positions: torch.Tensor, values: torch.Tensor, cond: torch.Tensor | None
    ) -> torch.Tensor:
        if positions.dim() != 3 or positions.shape[-1] != 3:
            raise ValueError(f"positions must be (B, Q, 3), got {tuple(positions.shape)}")
        if values.shape != positions.shape[:2]:
            raise ValueError("values must align with positions")
        v = values.to(positions.dtype)
        if self.signed_values:
            v = v * 2.0 - 1.0
        h = self.point_mlp(torch.cat([positions, v.unsqueeze(-1)], dim=-1))
        pooled = h.mean(dim=1) if self.pool == "mean" else h.max(dim=1).values
        _check_finite(pooled, "latent_pooling")
        if cond is None:
            cond = pooled.new_zeros(pooled.shape[0], self.cond_dim)
        z = self.fuse(torch.cat([pooled, cond], dim=-1))
        return _check_finite(z, "latent_projection")


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(self.act(self.fc1(self.act(x))))


class OccupancyDecoder(nn.Module):
    """(positions, latent, cond) -> occupancy probabilities in [0, 1].

    Strictly pointwise: each position is conditioned on (z, cond) by
    concatenation to its position embedding, then passed through residual
    blocks and a sigmoid head.  Batched evaluation therefore equals the
    concatenation of single-position evaluations.
    """

    def __init__(
        self,
        latent_dim: int = 128,
        cond_dim: int = 512,
        hidden: int = 128,
        blocks: int = 3,
        n_freqs: int = 6,
    ):
        super().__init__()
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.n_freqs = n_freqs
        pos_dim = 3 + 6 * n_freqs
        self.pos_embed = nn.Linear(pos_dim, hidden)
        self.fuse = nn.Linear(hidden + latent_dim + cond_dim, hidden)
        self.blocks = nn.Sequential(*[ResBlock(hidden) for _ in range(blocks)])
        self.head = nn.Linear(hidden, 1)

    def _pos_features(self, positions: torch.Tensor) -> torch.Tensor:
        """Raw coordinates plus sin/cos octaves (sharpens planar boundaries)."""
        parts = [positions]
        for i in range(self.n_freqs):
            arg = positions * (2.0**i * torch.pi)
            parts += [torch.sin(arg), torch.cos(arg)]
        return torch.cat(parts, dim=-1)

    def forward(
        self, positions: torch.Tensor, z: torch.Tensor, cond: torch.Tensor | None
    ) -> torch.Tensor:
        if positions.dim() != 3 or positions.shape[-1] != 3:
            raise ValueError(f"positions must be (B, Q, 3), got {tuple(positions.shape)}")
        if z.dim() != 2 or z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent must be (B, {self.latent_dim}), got {tuple(z.shape)}")
        if z.shape[0] != positions.shape[0]:
            raise ValueError("batch sizes of positions and latent disagree")
        if cond is None:
            cond = z.new_zeros(z.shape[0], self.cond_dim)
        elif cond.shape != (z.shape[0], self.cond_dim):
            raise ValueError(f"cond must be (B, {self.cond_dim}), got {tuple(cond.shape)}")
        h = self.pos_embed(self._pos_features(positions))
        code = torch.cat([z, cond], dim=-1)
        # fuse(cat[h, code]) with the per-sample half evaluated once and
        # broadcast: identical to concatenation + linear, far fewer FLOPs
        hidden = h.shape[-1]
        w_pos, w_code = self.fuse.weight[:, :hidden], self.fuse.weight[:, hidden:]
        h = nn.functional.linear(h, w_pos) + nn.functional.linear(code, w_code, self.fuse.bias).unsqueeze(1)
        h = self.blocks(h)
        logits = self.head(h).squeeze(-1)
        _check_finite(logits, "decoder_head")
        return torch.sigmoid(logits)


def stage_a_loss(
    pred: torch.Tensor,
    labels: torch.Tensor,
    coarse: torch.Tensor,
    gt_surface: torch.Tensor,
    eta: float,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """First-stage multi-task loss: summed binary cross-entropy over the query
    points plus ``eta`` times the squared Chamfer distance of the coarse cloud.

    Returns the total and both components (per-sample sums, batch-averaged).
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if pred.shape != labels.shape:
        raise ValueError("pred and labels must align")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(pred.dtype)
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    l_occ = bce.sum(dim=-1).mean() if bce.dim() > 1 else bce.sum()
    l_cd = chamfer_l2(coarse, gt_surface)
    total = l_occ + eta * l_cd
    return total, {"l_occ": l_occ, "l_cd": l_cd}
