"""Minimal multi-head attention blocks shared by the injection modules.

Hand-rolled (rather than nn.MultiheadAttention) so tests can pin the
projection weights and trace the arithmetic by hand, and so layer norm
and positional encodings can be switched off for degenerate-case checks.
GELU feed-forwards keep every loss smooth for finite-difference checks.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .errors import DimensionMismatch


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with bias-free projections."""

    def __init__(self, dim: int, num_heads: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim % num_heads != 0:
            raise DimensionMismatch(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim, bias=False).to(dtype)
        self.k_proj = nn.Linear(dim, dim, bias=False).to(dtype)
        self.v_proj = nn.Linear(dim, dim, bias=False).to(dtype)
        self.out_proj = nn.Linear(dim, dim, bias=False).to(dtype)

    def forward(self, query: torch.Tensor, key: torch.Tensor,
                value: torch.Tensor) -> torch.Tensor:
        # query: (Lq, D); key/value: (Lk, D)
        lq = query.shape[0]
        lk = key.shape[0]
        q = self.q_proj(query).view(lq, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).view(lk, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).view(lk, self.num_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / (self.head_dim ** 0.5)
        weights = F.softmax(scores, dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(lq, self.dim)
        return self.out_proj(out)

    def set_identity(self) -> None:
        """Make value and output projections the identity (test helper)."""
        with torch.no_grad():
            eye = torch.eye(self.dim, dtype=self.v_proj.weight.dtype)
            self.v_proj.weight.copy_(eye)
            self.out_proj.weight.copy_(eye)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim).to(dtype)
        self.fc2 = nn.Linear(mult * dim, dim).to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))

    def zero_(self) -> None:
        """Zero the output layer so the block is a no-op (test helper)."""
        with torch.no_grad():
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()


class CrossAttentionDecoderLayer(nn.Module):
    """One pre-norm cross-attention + feed-forward block.

    Probes the key/value sequence with the query vector; learned
    positional encodings are added to the key/value side only.
    """

    def __init__(self, dim: int, num_heads: int = 4, ff_mult: int = 4,
                 max_positions: int = 128, norm: bool = True,
                 positional: bool = True, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads, dtype=dtype)
        self.ff = FeedForward(dim, ff_mult, dtype=dtype)
        self.use_norm = norm
        self.use_positional = positional
        if norm:
            self.norm_q = nn.LayerNorm(dim).to(dtype)
            self.norm_kv = nn.LayerNorm(dim).to(dtype)
            self.norm_ff = nn.LayerNorm(dim).to(dtype)
        if positional:
            self.positions = nn.Parameter(
                0.02 * torch.randn(max_positions, dim, dtype=dtype))

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        # query: (D,); kv: (Lk, D)
        if query.shape[-1] != kv.shape[-1]:
            raise DimensionMismatch("query/key dims differ")
        if self.use_positional:
            if kv.shape[0] > self.positions.shape[0]:
                raise DimensionMismatch("sequence longer than positional table")
            kv = kv + self.positions[: kv.shape[0]]
        q = query.unsqueeze(0)
        if self.use_norm:
            attn_out = self.attn(self.norm_q(q), self.norm_kv(kv), self.norm_kv(kv))
        else:
            attn_out = self.attn(q, kv, kv)
        x = q + attn_out
        x = x + self.ff(self.norm_ff(x) if self.use_norm else x)
        return x.squeeze(0)


class SelfAttentionEncoderLayer(nn.Module):
    """One pre-norm self-attention + feed-forward block over a sequence."""

    def __init__(self, dim: int, num_heads: int = 4, ff_mult: int = 4,
                 max_positions: int = 128, norm: bool = True,
                 positional: bool = True, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads, dtype=dtype)
        self.ff = FeedForward(dim, ff_mult, dtype=dtype)
        self.use_norm = norm
        self.use_positional = positional
        if norm:
            self.norm_attn = nn.LayerNorm(dim).to(dtype)
            self.norm_ff = nn.LayerNorm(dim).to(dtype)
        if positional:
            self.positions = nn.Parameter(
                0.02 * torch.randn(max_positions, dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (L, D)
        if self.use_positional:
            if x.shape[0] > self.positions.shape[0]:
                raise DimensionMismatch("sequence longer than positional table")
            x = x + self.positions[: x.shape[0]]
        h = self.norm_attn(x) if self.use_norm else x
        x = x + self.attn(h, h, h)
        x = x + self.ff(self.norm_ff(x) if self.use_norm else x)
        return x
