"""Conditional point encoder over partial clouds.

Dynamic-graph edge convolutions extract per-point features, farthest-point
sampling keeps a sparse set of centers, attention blocks mix global and local
information into a pooled condition vector, and a linear head predicts a
coarse complete cloud used only to carry the Chamfer auxiliary loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class ConditionFeature:
    """Global condition vector plus the per-center tokens it was pooled from."""

    global_feat: torch.Tensor  # (B, C)
    tokens: torch.Tensor | None = None  # (B, T, D)

    def __post_init__(self) -> None:
        if self.global_feat.dim() != 2:
            raise ValueError(f"global_feat must be (B, C), got {tuple(self.global_feat.shape)}")


def _check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations after {stage}")
    return x


def knn_indices(x: torch.Tensor, k: int) -> torch.Tensor:
    """Indices (B, N, k) of the k nearest neighbors of each point, self excluded."""
    sq = x.pow(2).sum(dim=-1)
    dist = sq.unsqueeze(2) + sq.unsqueeze(1) - 2.0 * torch.bmm(x, x.transpose(1, 2))
    dist.diagonal(dim1=-2, dim2=-1).fill_(torch.inf)
    return dist.topk(k, dim=-1, largest=False).indices


def graph_features(feat: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Edge features (B, N, k, 2C): neighbor offset concatenated with the center."""
    b, n, c = feat.shape
    k = idx.shape[-1]
    flat = (idx + n * torch.arange(b, device=idx.device).view(b, 1, 1)).reshape(-1)
    gathered = feat.reshape(b * n, c)[flat].view(b, n, k, c)
    center = feat.unsqueeze(2).expand(b, n, k, c)
    return torch.cat([gathered - center, center], dim=-1)


def farthest_point_indices(xyz: torch.Tensor, m: int) -> torch.Tensor:
    """Greedy farthest-point subset (B, m).

    Seeded at the point farthest from the centroid, which keeps the selection
    invariant to input ordering (up to distance ties).
    """
    b, n, _ = xyz.shape
    m = min(m, n)
    idx = torch.empty(b, m, dtype=torch.long, device=xyz.device)
    dist = torch.full((b, n), torch.inf, device=xyz.device, dtype=xyz.dtype)
    farthest = (xyz - xyz.mean(dim=1, keepdim=True)).norm(dim=-1).argmax(dim=1)
    batch = torch.arange(b, device=xyz.device)
    for i in range(m):
        idx[:, i] = farthest
        d = (xyz - xyz[batch, farthest].unsqueeze(1)).norm(dim=-1)
        dist = torch.minimum(dist, d)
        farthest = dist.argmax(dim=1)
    return idx


class EdgeConv(nn.Module):
    """One dynamic-graph edge convolution: kNN in feature space, shared linear
    over edges, max over the neighborhood."""

    def __init__(self, in_dim: int, out_dim: int, k: int):
        super().__init__()
        self.k = k
        self.lin = nn.Linear(2 * in_dim, out_dim, bias=False)
        self.norm = nn.LayerNorm(out_dim)
        self.act = nn.LeakyReLU(negative_slope=0.2)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        idx = knn_indices(feat, self.k)
        edge = graph_features(feat, idx)  # (B, N, k, 2C)
        return self.act(self.norm(self.lin(edge))).max(dim=2).values


class AttentionBlock(nn.Module):
    """Pre-norm self-attention + MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PointEncoder(nn.Module):
    """Partial cloud (B, N, 3) -> condition feature and coarse complete cloud."""

    def __init__(
        self,
        cond_dim: int = 512,
        k: int = 16,
        edge_widths: tuple[int, ...] = (64, 128, 256),
        n_centers: int = 128,
        attn_layers: int = 4,
        attn_heads: int = 8,
        coarse_points: int = 256,
    ):
        super().__init__()
        self.k = k
        self.n_centers = n_centers
        self.coarse_points = coarse_points
        self.cond_dim = cond_dim
        convs = []
        in_dim = 3
        for width in edge_widths:
            convs.append(EdgeConv(in_dim, width, k))
            in_dim = width
        self.convs = nn.ModuleList(convs)
        self.pos_embed = nn.Sequential(nn.Linear(3, cond_dim), nn.GELU(), nn.Linear(cond_dim, cond_dim))
        self.feat_embed = nn.Linear(in_dim, cond_dim)
        self.blocks = nn.ModuleList(AttentionBlock(cond_dim, attn_heads) for _ in range(attn_layers))
        self.out_norm = nn.LayerNorm(cond_dim)
        self.coarse_head = nn.Linear(cond_dim, 3 * coarse_points)

    def forward(self, points: torch.Tensor) -> tuple[ConditionFeature, torch.Tensor]:
        if points.dim() != 3 or points.shape[-1] != 3:
            raise ValueError(f"points must be (B, N, 3), got {tuple(points.shape)}")
        if points.shape[1] < self.k + 1:
            raise ValueError(f"need at least k+1={self.k + 1} points, got {points.shape[1]}")
        feat = points
        for i, conv in enumerate(self.convs):
            feat = _check_finite(conv(feat), f"edge_conv_{i}")
        centers = farthest_point_indices(points, self.n_centers)
        batch = torch.arange(points.shape[0], device=points.device).unsqueeze(-1)
        sparse_xyz = points[batch, centers]
        sparse_feat = feat[batch, centers]
        tokens = self.pos_embed(sparse_xyz) + self.feat_embed(sparse_feat)
        for i, block in enumerate(self.blocks):
            tokens = _check_finite(block(tokens), f"attention_{i}")
        pooled = self.out_norm(tokens.max(dim=1).values)
        _check_finite(pooled, "pooling")
        coarse = self.coarse_head(pooled).view(-1, self.coarse_points, 3)
        return ConditionFeature(pooled, tokens), coarse


def chamfer_l2(q: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Symmetric squared Chamfer distance, mean per direction, summed.

    Accepts (N, 3) sets or (B, N, 3) batches (batch-averaged).  Differentiable
    with respect to ``q``; nearest-neighbor ties resolve to the lowest index.
    """
    if q.dim() == 2:
        q, g = q.unsqueeze(0), g.unsqueeze(0)
    if q.shape[1] == 0 or g.shape[1] == 0:
        raise ValueError("chamfer_l2 requires non-empty point sets")
    d2 = torch.cdist(q, g).pow(2)
    return (d2.min(dim=2).values.mean(dim=1) + d2.min(dim=1).values.mean(dim=1)).mean()
