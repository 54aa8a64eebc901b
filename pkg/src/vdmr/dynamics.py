"""Spatial dynamic injection.

Per-frame saliency heatmaps (global feature against each patch), a
sequence model summarizing their evolution into one dynamic feature per
video, and a loss matching the cosine-similarity structure of video
dynamics with that of dynamic-query embeddings.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import SelfAttentionEncoderLayer
from .encoders import FrameFeatures, TextEmbedding
from .errors import DimensionMismatch, ZeroVector


def safe_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ZeroVector("cosine argument has zero norm")
    return (a * b).sum() / (na * nb)


class SpatialDynamicInjection(nn.Module):
    def __init__(self, dim: int, grid: tuple[int, int], num_heads: int = 4,
                 ff_mult: int = 4, max_frames: int = 128,
                 seq_backend: str = "transformer", norm: bool = True,
                 positional: bool = True, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.dim = dim
        self.grid = grid
        self.seq_backend = seq_backend
        self.global_proj = nn.Linear(dim, dim, bias=False).to(dtype)
        self.patch_proj = nn.Linear(dim, dim, bias=False).to(dtype)
        self.flat_proj = nn.Linear(grid[0] * grid[1], dim).to(dtype)
        self.query_proj = nn.Linear(dim, dim).to(dtype)
        if seq_backend == "transformer":
            self.seq = SelfAttentionEncoderLayer(
                dim, num_heads=num_heads, ff_mult=ff_mult,
                max_positions=max_frames, norm=norm, positional=positional,
                dtype=dtype)
        elif seq_backend == "lstm":
            self.seq = nn.LSTM(dim, dim, batch_first=False).to(dtype)
        elif seq_backend == "identity":
            self.seq = nn.Identity()
        else:
            raise ValueError(f"unknown sequence backend {seq_backend!r}")

    def frame_heatmap(self, global_vec: torch.Tensor,
                      patches: torch.Tensor) -> torch.Tensor:
        """Saliency map: projected global against each projected patch.

        global_vec: (D,), patches: (D, H, W) -> (H, W)
        """
        if global_vec.shape[0] != patches.shape[0]:
            raise DimensionMismatch("global/patch dims differ")
        d, h, w = patches.shape
        g = self.global_proj(global_vec)
        p = self.patch_proj(patches.reshape(d, h * w).T)  # (H*W, D)
        return (p @ g).reshape(h, w) / (d ** 0.5)

    def dynamic_feature(self, heatmaps: torch.Tensor) -> torch.Tensor:
        """Summarize a (L, H, W) heatmap sequence into one D-vector."""
        lv = heatmaps.shape[0]
        flat = heatmaps.reshape(lv, -1)
        m = self.flat_proj(flat)  # (L, D)
        if self.seq_backend == "lstm":
            out, _ = self.seq(m)
        else:
            out = self.seq(m)
        return out.mean(dim=0)

    def video_dynamic(self, frames: FrameFeatures) -> torch.Tensor:
        """Heatmaps for every frame, then the pooled dynamic feature."""
        patches = frames.patches.detach()  # visual path is frozen
        maps = torch.stack([
            self.frame_heatmap(frames.global_.detach()[:, i], patches[i])
            for i in range(frames.num_frames)
        ])
        return self.dynamic_feature(maps)

    def loss(self, m_a: torch.Tensor, m_b: torch.Tensor,
             q_a: TextEmbedding, q_b: TextEmbedding) -> torch.Tensor:
        """Squared gap between video-side and query-side cosine similarity."""
        for q in (q_a, q_b):
            if q.source_kind != "dynamic":
                raise ValueError("structure loss expects dynamic query embeddings")
        eps_v = safe_cosine(m_a, m_b)
        eps_q = safe_cosine(self.query_proj(q_a.vector),
                            self.query_proj(q_b.vector))
        return (eps_v - eps_q) ** 2

    def batch_loss(self, ms: list[torch.Tensor],
                   qs: list[TextEmbedding]) -> torch.Tensor:
        """Unrestricted double sum over pairs, normalized by n^2.

        Includes the i == j diagonal, which contributes zero for
        deterministic features.
        """
        n = len(ms)
        if n != len(qs):
            raise DimensionMismatch("feature/query counts differ")
        total = ms[0].new_zeros(())
        for i in range(n):
            for j in range(n):
                total = total + self.loss(ms[i], ms[j], qs[i], qs[j])
        return total / (n * n)
