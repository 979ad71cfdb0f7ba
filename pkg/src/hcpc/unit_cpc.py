"""Segment-level CPC: segment encoder, unit context, k-means quantizer, adjacent-negative loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .frame_cpc import PredictionHeads, _gather_rows
from .segmenter import Segmentation, SegmentationError

log = logging.getLogger(__name__)


@dataclass
class UnitCpcConfig:
    d_prime: int = 64
    hidden: int = 64
    M: int = 2
    codebook_size: int = 64
    lam: float = 0.25
    commitment_sign: float = 1.0  # -1 reproduces the sign as printed; +1 is the usual commitment loss
    ema_decay: float = 0.99
    dead_code_steps: int = 200
    n_heads: int = 4
    negatives: str = "adjacent"  # adjacent | random
    quantize_targets: bool = True

    def validate(self) -> None:
        if self.M < 1:
            raise ValueError("unit.M must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("unit.codebook_size must be >= 2")
        if not 0 < self.ema_decay < 1:
            raise ValueError("unit.ema_decay must be in (0, 1)")
        if self.negatives not in ("adjacent", "random"):
            raise ValueError("unit.negatives must be adjacent or random")
        if self.commitment_sign not in (1.0, -1.0):
            raise ValueError("unit.commitment_sign must be +1 or -1")
        if self.d_prime % self.n_heads:
            raise ValueError("unit.d_prime must be divisible by unit.n_heads")


class SegmentEncoder(nn.Module):
    """Row-wise MLP with two hidden ReLU layers."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, d_out)
        )

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        if s.shape[-2] == 0:
            raise SegmentationError("empty segmentation")
        return self.net(s)


class UnitContext(nn.Module):
    """Single-layer LSTM; h_k summarizes u_0..u_{k-1} (h_0 is the zero state)."""

    def __init__(self, dim: int):
        super().__init__()
        self.rnn = nn.LSTM(dim, dim, batch_first=True)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        start = u.new_zeros(u.shape[0], 1, u.shape[2])
        if u.shape[1] == 1:
            return start
        out, _ = self.rnn(u[:, :-1])
        return torch.cat([start, out], dim=1)


# --- quantizer -------------------------------------------------------------


def nearest_codes(u: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """argmin_i ||u - e_i|| over the last dim; ties go to the lowest index."""
    d = ((u.unsqueeze(-2) - embeddings) ** 2).sum(-1)
    return d.argmin(-1)


def quantize(u: torch.Tensor, embeddings: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(indices, u_q) with u_q an exact copy of the selected codewords."""
    idx = nearest_codes(u.detach(), embeddings)
    return idx, embeddings[idx]


def straight_through(u: torch.Tensor, u_q: torch.Tensor) -> torch.Tensor:
    return u + (u_q - u).detach()


def kmeans_loss(
    u: torch.Tensor,
    u_q: torch.Tensor,
    lam: float,
    mask: Optional[torch.Tensor] = None,
    sign: float = 1.0,
) -> torch.Tensor:
    """mean ||sg(u) - u_q||^2 + sign * lam * mean ||u - sg(u_q)||^2 over valid rows."""
    codebook = ((u.detach() - u_q) ** 2).sum(-1)
    commit = ((u - u_q.detach()) ** 2).sum(-1)
    if mask is not None:
        n = mask.sum().clamp(min=1)
        return (codebook * mask).sum() / n + sign * lam * (commit * mask).sum() / n
    return codebook.mean() + sign * lam * commit.mean()


class Codebook(nn.Module):
    """Codewords maintained by exponential-moving-average k-means.

    Codewords are buffers: they move only through :meth:`ema_update`, which
    also re-seeds any codeword unused for ``dead_code_steps`` updates with a
    random vector from the current batch. The codebook is initialised from
    the first batch it sees.
    """

    def __init__(self, size: int, dim: int, decay: float = 0.99, dead_code_steps: int = 200, eps: float = 1e-5):
        super().__init__()
        self.decay = decay
        self.dead_code_steps = dead_code_steps
        self.eps = eps
        self.register_buffer("embeddings", torch.randn(size, dim) * 0.1)
        self.register_buffer("ema_counts", torch.zeros(size))
        self.register_buffer("ema_sums", torch.zeros(size, dim))
        self.register_buffer("idle_steps", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def _draw(self, x: torch.Tensor, n: int, generator) -> torch.Tensor:
        idx = torch.randint(x.shape[0], (n,), generator=generator)
        return x[idx]

    @torch.no_grad()
    def init_from(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> None:
        if x.shape[0] >= self.size:
            idx = torch.randperm(x.shape[0], generator=generator)[: self.size]
            picked = x[idx]
        else:
            picked = self._draw(x, self.size, generator)
        self.embeddings.copy_(picked)
        self.ema_sums.copy_(picked)
        self.ema_counts.fill_(1.0)
        self.idle_steps.zero_()
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, x: torch.Tensor, idx: torch.Tensor, generator: Optional[torch.Generator] = None) -> int:
        """x: (n, d) detached vectors, idx: (n,) their assignments. Returns #re-seeded codes."""
        x = x.to(self.embeddings.dtype)
        onehot = F.one_hot(idx, self.size).to(x.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ x
        self.ema_counts.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_sums.mul_(self.decay).add_(sums, alpha=1 - self.decay)
        total = self.ema_counts.sum()
        smoothed = (self.ema_counts + self.eps) / (total + self.size * self.eps) * total
        self.embeddings.copy_(self.ema_sums / smoothed.unsqueeze(1))

        used = counts > 0
        self.idle_steps.add_(1).masked_fill_(used, 0)
        dead = self.idle_steps >= self.dead_code_steps
        n_dead = int(dead.sum())
        if n_dead and x.shape[0] > 0:
            fresh = self._draw(x, n_dead, generator)
            self.embeddings[dead] = fresh
            self.ema_sums[dead] = fresh
            self.ema_counts[dead] = 1.0
            self.idle_steps[dead] = 0
        return n_dead


# --- loss ------------------------------------------------------------------


def sample_random_unit_negatives(
    n_segments: torch.Tensor, S: int, M: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """(B, S, M, 2) random distractor indices in the same sequence, excluding the target k+m."""
    B = n_segments.shape[0]
    keys = torch.rand(B, S, M, S, generator=generator)
    j = torch.arange(S)
    target = torch.arange(S)[:, None] + torch.arange(1, M + 1)[None, :]  # (S, M)
    invalid = (j[None, None, None, :] >= n_segments[:, None, None, None]) | (
        j[None, None, None, :] == target[None, :, :, None]
    )
    keys = keys.masked_fill(invalid, -1.0)
    return keys.topk(2, dim=-1).indices


def cpc_high_loss(
    targets: torch.Tensor,
    preds: torch.Tensor,
    n_segments: torch.Tensor,
    neg_idx: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor, int]:
    """Contrastive loss on segment codes with two distractors per target.

    targets: (B, S, d') quantized (straight-through) unit codes; preds:
    (B, S, M, d') head outputs from h_k; n_segments: (B,). With ``neg_idx``
    None the distractors are the target's neighbours k+m-1 and k+m+1;
    otherwise neg_idx (B, S, M, 2) supplies them. Only pairs with
    k+m+1 < n_segments count.

    Returns (pooled mean loss, per-sequence mean loss, #sequences too short).
    Sequences without a valid pair contribute 0.
    """
    B, S, M, D = preds.shape
    k = torch.arange(S)[:, None]
    m = torch.arange(1, M + 1)[None, :]
    tgt = (k + m).expand(S, M)
    valid = (k + m + 1)[None] < n_segments[:, None, None]  # (B, S, M)
    clip = lambda i: i.clamp(max=S - 1)
    pos_idx = clip(tgt).expand(B, S, M)
    if neg_idx is None:
        neg_idx = torch.stack([clip(tgt - 1), clip(tgt + 1)], dim=-1).expand(B, S, M, 2)
    pos = (preds * _gather_rows(targets, pos_idx)).sum(-1, keepdim=True)
    neg = (preds.unsqueeze(-2) * _gather_rows(targets, neg_idx)).sum(-1)
    nll = -F.log_softmax(torch.cat([pos, neg], dim=-1), dim=-1)[..., 0]  # (B, S, M)
    w = valid.to(nll.dtype)
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    per_seq_n = w.sum((1, 2))
    per_seq = nll.sum((1, 2)) / per_seq_n.clamp(min=1)
    n_short = int((per_seq_n == 0).sum())
    if n_short:
        log.debug("sequence too short for %d sequences", n_short)
    total = w.sum()
    loss = nll.sum() / total if total > 0 else preds.sum() * 0.0
    return loss, per_seq, n_short


def upsample(seq: torch.Tensor, seg: Segmentation) -> torch.Tensor:
    """Repeat row j of seq over span j: (B, S, d) -> (B, T, d)."""
    if seq.shape[1] != seg.max_segments:
        raise SegmentationError("span/sequence mismatch")
    D = seq.shape[-1]
    return torch.gather(seq, 1, seg.seg_id.unsqueeze(-1).expand(-1, -1, D))


class UnitCPC(nn.Module):
    def __init__(self, d_in: int, cfg: UnitCpcConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SegmentEncoder(d_in, cfg.hidden, cfg.d_prime)
        self.context = UnitContext(cfg.d_prime)
        self.heads = PredictionHeads(cfg.d_prime, cfg.M, cfg.n_heads)
        self.codebook = Codebook(cfg.codebook_size, cfg.d_prime, cfg.ema_decay, cfg.dead_code_steps)

    def forward(self, s: torch.Tensor, mask: torch.Tensor):
        """s: (B, S, d) pooled segments -> u, h, preds (B, S, M, d')."""
        u = self.encoder(s)
        h = self.context(u)
        return u, h, self.heads(h, key_padding=~mask)
