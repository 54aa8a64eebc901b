"""Visual context injection.

The static query probes the frame features through a cross-attention
decoder; the resulting context feature becomes the regression target for
a linear projection of the dynamic-query embedding.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import CrossAttentionDecoderLayer
from .encoders import FrameFeatures, TextEmbedding
from .errors import DimensionMismatch


class VisualContextInjection(nn.Module):
    def __init__(self, dim: int, num_heads: int = 4, ff_mult: int = 4,
                 max_frames: int = 128, norm: bool = True,
                 positional: bool = True, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.dim = dim
        self.decoder = CrossAttentionDecoderLayer(
            dim, num_heads=num_heads, ff_mult=ff_mult,
            max_positions=max_frames, norm=norm, positional=positional,
            dtype=dtype)
        self.proj = nn.Linear(dim, dim).to(dtype)

    def context_feature(self, x_qs: TextEmbedding,
                        frames: FrameFeatures) -> torch.Tensor:
        """Static-query-conditioned attention summary of the frame globals."""
        if x_qs.source_kind != "static":
            raise ValueError("context probe expects the static query embedding")
        if x_qs.vector.shape[0] != frames.dim:
            raise DimensionMismatch(
                f"query dim {x_qs.vector.shape[0]} != frame dim {frames.dim}")
        # The visual path is frozen; no gradient flows into the features.
        return self.decoder(x_qs.vector, frames.global_.detach().T)

    def loss(self, x_qd: TextEmbedding, ctx: torch.Tensor) -> torch.Tensor:
        """Squared L2 between the projected dynamic embedding and the context."""
        if x_qd.source_kind != "dynamic":
            raise ValueError("injection loss expects the dynamic query embedding")
        diff = self.proj(x_qd.vector) - ctx
        return (diff * diff).sum()
