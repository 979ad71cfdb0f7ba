from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F


class ChannelNorm(nn.Module):
    """Per-timestep normalization across channels, input (B, C, T)."""

    def __init__(self, num_features: int, epsilon: float = 1e-5):
        super().__init__()
        self.epsilon = epsilon
        self.weight = nn.Parameter(torch.ones(1, num_features, 1))
        self.bias = nn.Parameter(torch.zeros(1, num_features, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return (x - mean) * torch.rsqrt(var + self.epsilon) * self.weight + self.bias


class AttentionBlock(nn.Module):
    """One pre-norm transformer layer (self-attention + feed-forward).

    ``causal`` restricts position t to keys <= t. ``max_rel`` > 0 adds a
    learned per-head bias indexed by the clipped offset (key - query), which
    lets a single layer look at its immediate neighbours cheaply.
    """

    def __init__(
        self,
        dim: int,
        n_heads: int = 4,
        ff_mult: int = 4,
        causal: bool = False,
        max_rel: int = 0,
        dropout: float = 0.0,
    ):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.causal = causal
        self.max_rel = max_rel
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.ReLU(), nn.Linear(ff_mult * dim, dim))
        self.dropout = nn.Dropout(dropout)
        if max_rel > 0:
            self.rel_bias = nn.Parameter(torch.zeros(n_heads, 2 * max_rel + 1))

    def _bias(self, T: int, device, dtype) -> Optional[torch.Tensor]:
        bias = None
        if self.max_rel > 0:
            pos = torch.arange(T, device=device)
            rel = (pos[None, :] - pos[:, None]).clamp(-self.max_rel, self.max_rel) + self.max_rel
            bias = self.rel_bias[:, rel].to(dtype)  # (H, T, T)
        if self.causal:
            mask = torch.ones(T, T, dtype=torch.bool, device=device).triu(1)
            neg = torch.zeros(T, T, dtype=dtype, device=device).masked_fill(mask, float("-inf"))
            bias = neg if bias is None else bias + neg
        return bias

    def forward(self, x: torch.Tensor, key_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        """x: (B, T, D); key_padding: (B, T) bool, True where the key is padding."""
        B, T, D = x.shape
        H = self.n_heads
        q, k, v = self.qkv(self.norm1(x)).view(B, T, 3, H, D // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // H)  # (B, H, T, T)
        bias = self._bias(T, x.device, x.dtype)
        if bias is not None:
            scores = scores + bias
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        attn = self.dropout(F.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.dropout(self.proj(out))
        return x + self.dropout(self.ff(self.norm2(x)))
