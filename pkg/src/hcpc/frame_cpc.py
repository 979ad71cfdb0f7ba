"""Frame-level CPC: strided conv encoder, recurrent context, InfoNCE loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .layers import AttentionBlock, ChannelNorm


@dataclass
class FrameCpcConfig:
    conv_channels: int = 64
    conv_widths: Tuple[int, ...] = (4, 4, 2)
    conv_strides: Tuple[int, ...] = (4, 2, 2)
    context_layers: int = 1
    n_predictions: int = 4
    n_negatives: int = 16
    n_heads: int = 4
    dropout: float = 0.0

    @property
    def hop(self) -> int:
        return int(np.prod(self.conv_strides))

    def validate(self) -> None:
        if len(self.conv_widths) != len(self.conv_strides) or not self.conv_widths:
            raise ValueError("frame.conv_widths and frame.conv_strides must have equal nonzero length")
        if any(w < s for w, s in zip(self.conv_widths, self.conv_strides)):
            raise ValueError("frame.conv_widths must be >= the matching stride")
        if self.n_predictions < 1 or self.n_negatives < 1:
            raise ValueError("frame.n_predictions and frame.n_negatives must be >= 1")
        if self.conv_channels % self.n_heads:
            raise ValueError("frame.conv_channels must be divisible by frame.n_heads")


class FrameEncoder(nn.Module):
    """Strided 1-D conv stack; each layer pads by (width - stride) so the
    output has exactly len / prod(strides) frames."""

    def __init__(self, cfg: FrameCpcConfig):
        super().__init__()
        self.hop = cfg.hop
        layers = []
        c_in = 1
        for w, s in zip(cfg.conv_widths, cfg.conv_strides):
            layers.append(nn.Conv1d(c_in, cfg.conv_channels, w, stride=s))
            layers.append(ChannelNorm(cfg.conv_channels))
            c_in = cfg.conv_channels
        self.layers = nn.ModuleList(layers)
        self.pads = [((w - s) // 2, (w - s) - (w - s) // 2) for w, s in zip(cfg.conv_widths, cfg.conv_strides)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) samples -> (B, T, d) encodings."""
        if x.shape[-1] % self.hop:
            raise ValueError("length mismatch: samples not divisible by hop")
        h = x.unsqueeze(1)
        for i, pad in enumerate(self.pads):
            h = F.pad(h, pad)
            h = F.relu(self.layers[2 * i + 1](self.layers[2 * i](h)))
        return h.transpose(1, 2)


class ContextNetwork(nn.Module):
    """LSTM over encodings, shifted so that c_t only sees z_0..z_{t-1}.

    c_0 is the zero initial state (nothing consumed yet).
    """

    def __init__(self, dim: int, layers: int):
        super().__init__()
        self.rnn = nn.LSTM(dim, dim, num_layers=layers, batch_first=True)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        start = z.new_zeros(z.shape[0], 1, z.shape[2])
        if z.shape[1] == 1:
            return start
        out, _ = self.rnn(z[:, :-1])
        return torch.cat([start, out], dim=1)


class PredictionHeads(nn.Module):
    """Causal attention over contexts followed by one linear map per step ahead."""

    def __init__(self, dim: int, n_steps: int, n_heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.n_steps = n_steps
        self.attn = AttentionBlock(dim, n_heads=n_heads, causal=True, dropout=dropout)
        self.out = nn.Linear(dim, dim * n_steps)

    def forward(self, c: torch.Tensor, key_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, T, d) -> (B, T, n_steps, d)."""
        B, T, D = c.shape
        return self.out(self.attn(c, key_padding)).view(B, T, self.n_steps, D)


class FrameCPC(nn.Module):
    def __init__(self, cfg: FrameCpcConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg)
        self.context = ContextNetwork(cfg.conv_channels, cfg.context_layers)
        self.heads = PredictionHeads(cfg.conv_channels, cfg.n_predictions, cfg.n_heads, cfg.dropout)

    def forward(self, samples: torch.Tensor):
        z = self.encoder(samples)
        c = self.context(z)
        return z, c, self.heads(c)


# --- negatives and loss ----------------------------------------------------


class SamplingError(ValueError):
    pass


def sample_negatives(T: int, t: int, N: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn without replacement from [0, T) minus the window t+1..t+N."""
    candidates = np.array([i for i in range(T) if not (t < i <= t + N)])
    if len(candidates) < count:
        raise SamplingError("sequence too short for negative sampling")
    return rng.choice(candidates, size=count, replace=False)


def sample_negatives_batch(
    batch: int, T: int, N: int, count: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """(batch, T - N, count) negative indices, one draw per anchor step t.

    Uniform without replacement: the top-``count`` of i.i.d. uniform keys,
    with the prediction window forced to the bottom.
    """
    if N >= T:
        raise SamplingError("prediction window exceeds sequence")
    if T - N < count:
        raise SamplingError("sequence too short for negative sampling")
    Tv = T - N
    keys = torch.rand(batch, Tv, T, generator=generator)
    t = torch.arange(Tv)[:, None]
    i = torch.arange(T)[None, :]
    window = (i > t) & (i <= t + N)
    keys = keys.masked_fill(window[None], -1.0)
    return keys.topk(count, dim=-1).indices


def _gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x: (B, T, d); idx: (B, ...) long -> (B, ..., d)."""
    B, T, D = x.shape
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, D))
    return out.view(*idx.shape, D)


def cpc_low_loss(z: torch.Tensor, preds: torch.Tensor, neg_idx: torch.Tensor) -> torch.Tensor:
    """Mean InfoNCE over anchors t < T - N and steps n = 1..N.

    z: (B, T, d) encodings; preds: (B, T, N, d) head outputs from c_t;
    neg_idx: (B, T - N, K) negative frame indices shared across the N heads.
    The positive is part of the softmax denominator.
    """
    B, T, N, D = preds.shape
    if N >= T:
        raise SamplingError("prediction window exceeds sequence")
    Tv = T - N
    p = preds[:, :Tv]  # (B, Tv, N, D)
    pos_idx = (torch.arange(Tv)[:, None] + torch.arange(1, N + 1)[None, :]).expand(B, Tv, N)
    z_pos = _gather_rows(z, pos_idx)  # (B, Tv, N, D)
    z_neg = _gather_rows(z, neg_idx)  # (B, Tv, K, D)
    pos = (p * z_pos).sum(-1, keepdim=True)
    neg = torch.einsum("btnd,btkd->btnk", p, z_neg)
    logits = torch.cat([pos, neg], dim=-1)
    return -F.log_softmax(logits, dim=-1)[..., 0].mean()
