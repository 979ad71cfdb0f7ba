"""Variable-rate downsampling: boundary policy, segment pooling, REINFORCE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .layers import AttentionBlock

log = logging.getLogger(__name__)

MODES = ("policy", "oracle", "fixed_rate", "threshold")
P_MIN = 1e-4


@dataclass
class SegmenterConfig:
    l_bar: float = 8.0
    n_windows: int = 64
    mode: str = "policy"
    fixed_rate_k: int = 8
    baseline_momentum: float = 0.9
    eval_mode: str = "threshold"  # how a policy model segments at inference: threshold | sample
    d_model: int = 64
    n_heads: int = 4
    max_rel: int = 4

    def validate(self, seq_len: Optional[int] = None) -> None:
        if self.mode not in MODES:
            raise ValueError(f"segmenter.mode must be one of {MODES}")
        if self.eval_mode not in ("threshold", "sample"):
            raise ValueError("segmenter.eval_mode must be threshold or sample")
        if self.l_bar <= 1:
            raise ValueError("segmenter.l_bar must be > 1")
        if seq_len is not None and self.l_bar >= seq_len:
            raise ValueError("segmenter.l_bar must be < data.seq_len_frames")
        if self.fixed_rate_k < 1:
            raise ValueError("segmenter.fixed_rate_k must be >= 1")
        if not 0 <= self.baseline_momentum < 1:
            raise ValueError("segmenter.baseline_momentum must be in [0, 1)")
        if self.n_windows < 1:
            raise ValueError("segmenter.n_windows must be >= 1")


class SegmentationError(ValueError):
    pass


class BoundaryPredictor(nn.Module):
    """Bidirectional attention layer + linear head -> per-frame boundary probability."""

    def __init__(self, in_dim: int, cfg: SegmenterConfig):
        super().__init__()
        self.inp = nn.Linear(in_dim, cfg.d_model)
        self.attn = AttentionBlock(cfg.d_model, n_heads=cfg.n_heads, max_rel=cfg.max_rel)
        self.head = nn.Linear(cfg.d_model, 1)
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.constant_(self.head.bias, math.log(1.0 / (cfg.l_bar - 1.0)))  # logit(1 / l_bar)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, d) -> probabilities (B, T) clamped to [P_MIN, 1 - P_MIN].

        The input is detached: policy gradients never reach the encoder.
        """
        logits = self.head(self.attn(self.inp(z.detach()))).squeeze(-1)
        return torch.sigmoid(logits).clamp(P_MIN, 1 - P_MIN)


# --- sampling --------------------------------------------------------------


def boundaries_from_frames(frames: Sequence[Sequence[int]], T: int, dtype=torch.float32) -> torch.Tensor:
    b = torch.zeros(len(frames), T, dtype=dtype)
    for i, f in enumerate(frames):
        b[i, torch.as_tensor(list(f), dtype=torch.long)] = 1.0
    b[:, 0] = 1.0
    return b


def sample_boundaries(
    p: torch.Tensor,
    mode: str,
    generator: Optional[torch.Generator] = None,
    ground_truth: Optional[Sequence[Sequence[int]]] = None,
    fixed_rate_k: int = 8,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Boundary indicators b (B, T) and their log-probability under p (B,).

    policy: Bernoulli(p_t) per frame; threshold: p_t >= 0.5; oracle:
    ground-truth frames; fixed_rate: every k-th frame. b_0 is always 1 and
    is excluded from logp.
    """
    B, T = p.shape
    if mode == "policy":
        b = torch.bernoulli(p.detach(), generator=generator)
    elif mode == "threshold":
        b = (p.detach() >= 0.5).to(p.dtype)
    elif mode == "oracle":
        if ground_truth is None:
            raise SegmentationError("oracle mode needs labels")
        b = boundaries_from_frames(ground_truth, T, p.dtype)
    elif mode == "fixed_rate":
        b = (torch.arange(T) % fixed_rate_k == 0).to(p.dtype).expand(B, T).clone()
    else:
        raise SegmentationError(f"unknown segmentation mode {mode!r}")
    b[:, 0] = 1.0
    step_logp = b * torch.log(p) + (1 - b) * torch.log1p(-p)
    return b, step_logp[:, 1:].sum(-1)


# --- pooling ---------------------------------------------------------------


@dataclass
class Segmentation:
    seg_id: torch.Tensor  # (B, T) long, segment index of each frame
    n_segments: torch.Tensor  # (B,) long
    lengths: torch.Tensor  # (B, S) long, 0 for padding
    mask: torch.Tensor  # (B, S) bool, True for real segments

    @property
    def max_segments(self) -> int:
        return self.lengths.shape[1]

    def spans(self, i: int) -> List[Tuple[int, int]]:
        ends = torch.cumsum(self.lengths[i, : int(self.n_segments[i])], 0).tolist()
        starts = [0] + ends[:-1]
        return list(zip(starts, ends))

    def boundaries(self, i: int) -> List[int]:
        return [s for s, _ in self.spans(i)]


def segmentation_from_boundaries(b: torch.Tensor) -> Segmentation:
    b = b.detach().clone()
    b[:, 0] = 1
    seg_id = torch.cumsum(b.long(), dim=1) - 1
    n_seg = seg_id[:, -1] + 1
    S = int(n_seg.max())
    B, T = b.shape
    lengths = torch.zeros(B, S, dtype=torch.long)
    lengths.scatter_add_(1, seg_id, torch.ones_like(seg_id))
    mask = torch.arange(S)[None, :] < n_seg[:, None]
    return Segmentation(seg_id=seg_id, n_segments=n_seg, lengths=lengths, mask=mask)


def pool_segments(z: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, Segmentation]:
    """Mean of z over each segment; s is (B, S, d) with zero rows as padding.

    Sums are accumulated frame by frame in time order, then divided by the
    segment length. Differentiable in z.
    """
    seg = segmentation_from_boundaries(b)
    B, T, D = z.shape
    S = seg.max_segments
    flat = (seg.seg_id + S * torch.arange(B)[:, None]).reshape(-1)
    sums = z.new_zeros(B * S, D).index_add(0, flat, z.reshape(B * T, D))
    denom = seg.lengths.clamp(min=1).reshape(-1, 1).to(z.dtype)
    return (sums / denom).view(B, S, D), seg


# --- regularizer -----------------------------------------------------------


def sample_windows(
    batch: int, T: int, length: int, n_windows: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """(n_windows, 2) rows of (sequence index, start), uniform over all windows in the batch."""
    per_seq = T - length + 1
    if per_seq < 1:
        raise SegmentationError("sequence shorter than l_bar")
    flat = torch.randint(batch * per_seq, (n_windows,), generator=generator)
    return torch.stack([flat // per_seq, flat % per_seq], dim=1)


def rate_regularizer(p: torch.Tensor, l_bar: float, windows: torch.Tensor) -> torch.Tensor:
    """Mean over windows of (sum of p over the window - 1)^2."""
    length = int(round(l_bar))
    offs = torch.arange(length)
    rows = windows[:, :1].expand(-1, length)
    cols = windows[:, 1:2] + offs[None, :]
    return ((p[rows, cols].sum(-1) - 1.0) ** 2).mean()


# --- REINFORCE -------------------------------------------------------------


class ReinforceBaseline:
    """EMA of the batch-mean high-level loss; None until the first update."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.value: Optional[float] = None

    def update(self, batch_mean: float) -> None:
        if self.value is None:
            self.value = batch_mean
        else:
            self.value = self.momentum * self.value + (1 - self.momentum) * batch_mean

    def state_dict(self) -> dict:
        return {"momentum": self.momentum, "value": self.value}

    def load_state_dict(self, state: dict) -> None:
        self.momentum = state["momentum"]
        self.value = state["value"]


def policy_gradient(
    logp: torch.Tensor, seq_losses: torch.Tensor, baseline: ReinforceBaseline
) -> torch.Tensor:
    """Surrogate whose gradient is mean_seq (L_H(b_seq) - baseline) * grad logp_seq.

    Losses are treated as constants. The baseline used is the value before
    this batch; it is updated afterwards. Non-finite losses drop their
    sequence from the estimate.
    """
    losses = seq_losses.detach()
    finite = torch.isfinite(losses)
    if not finite.all():
        log.warning("skipping %d sequences with non-finite reward", int((~finite).sum()))
    if not finite.any():
        return logp.sum() * 0.0
    b = float(losses[finite].mean()) if baseline.value is None else baseline.value
    adv = torch.where(finite, losses - b, torch.zeros_like(losses))
    surrogate = (adv * logp).sum() / finite.sum()
    baseline.update(float(losses[finite].mean()))
    return surrogate
