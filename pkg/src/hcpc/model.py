"""The two-level model: frame CPC -> boundary policy + pooling -> unit CPC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .config import RunConfig
from .frame_cpc import FrameCPC
from .segmenter import BoundaryPredictor, Segmentation, pool_segments, sample_boundaries
from .unit_cpc import UnitCPC, quantize, upsample


class HierarchicalCPC(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.frame.conv_channels
        self.frame = FrameCPC(cfg.frame)
        self.policy = BoundaryPredictor(d, cfg.segmenter)
        self.unit = UnitCPC(d, cfg.unit)

    def param_groups(self, lr: float, policy_lr_mult: float = 1.0):
        return [
            {"params": list(self.frame.parameters()) + list(self.unit.parameters()), "lr": lr, "base_lr": lr},
            {"params": list(self.policy.parameters()), "lr": lr * policy_lr_mult, "base_lr": lr * policy_lr_mult},
        ]

    def inference_mode(self) -> str:
        mode = self.cfg.segmenter.mode
        if mode == "policy":
            return "threshold" if self.cfg.segmenter.eval_mode == "threshold" else "policy"
        return mode

    @torch.no_grad()
    def analyze(
        self,
        samples: torch.Tensor,
        ground_truth: Optional[Sequence[Sequence[int]]] = None,
        mode: Optional[str] = None,
        generator: Optional[torch.Generator] = None,
    ) -> "Analysis":
        """Frozen forward pass used by evaluation and segmentation export."""
        mode = mode or self.inference_mode()
        z, c, _ = self.frame(samples)
        p = self.policy(z)
        b, _ = sample_boundaries(
            p, mode, generator=generator, ground_truth=ground_truth, fixed_rate_k=self.cfg.segmenter.fixed_rate_k
        )
        s, seg = pool_segments(z, b)
        u, h, _ = self.unit(s, seg.mask)
        codes = None
        if bool(self.unit.codebook.initialized):
            codes, _ = quantize(u, self.unit.codebook.embeddings)
        return Analysis(z=z, c=c, p=p, b=b, seg=seg, u=u, h=h, codes=codes, h_frames=upsample(h, seg))


@dataclass
class Analysis:
    z: torch.Tensor
    c: torch.Tensor
    p: torch.Tensor
    b: torch.Tensor
    seg: Segmentation
    u: torch.Tensor
    h: torch.Tensor
    codes: Optional[torch.Tensor]
    h_frames: torch.Tensor
