"""Gradient verification and seeded random streams.

Autograd (torch) supplies the analytic gradients for every trainable module;
:func:`grad_check` cross-checks them against central finite differences.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

STREAM_NAMES = ("data", "negatives", "policy", "windows", "quantizer")


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradReport:
    per_param: Dict[str, float]
    tol: float
    max_rel_err: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_rel_err = max(self.per_param.values(), default=0.0)
        self.passed = self.max_rel_err <= self.tol


def _eval(loss_fn, params):
    with torch.no_grad():
        out = loss_fn(*params)
    value = float(out)
    if not math.isfinite(value):
        raise GradCheckError("loss diverged")
    return value


def grad_check(
    loss_fn: Callable[..., torch.Tensor],
    params: Sequence[torch.Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    names: Optional[Sequence[str]] = None,
    analytic: Optional[Callable[..., Sequence[torch.Tensor]]] = None,
) -> GradReport:
    """Compare autograd (or a supplied ``analytic``) gradient with central differences.

    ``loss_fn(*params)`` must return a scalar tensor and be deterministic;
    anything stochastic inside it has to be frozen (fixed indices or a
    generator re-seeded on every call). The relative error per element is
    ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [p.detach().clone().requires_grad_(True) for p in params]
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    for p in params:
        if not torch.isfinite(p).all():
            raise GradCheckError("parameters must be finite")

    first = _eval(loss_fn, params)
    if _eval(loss_fn, params) != first:
        raise GradCheckError("stochastic loss, freeze sampling first")

    if analytic is None:
        loss = loss_fn(*params)
        if not torch.isfinite(loss):
            raise GradCheckError("loss diverged")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    else:
        grads = list(analytic(*params))

    per_param = {}
    for name, p, g in zip(names, params, grads):
        worst = 0.0
        flat = p.data.view(-1)
        g = g.detach().reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = _eval(loss_fn, params)
            flat[i] = orig - step
            down = _eval(loss_fn, params)
            flat[i] = orig
            central = (up - down) / (2 * step)
            a = g[i].item()
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
        per_param[name] = worst
    return GradReport(per_param=per_param, tol=tol)


def _stream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngStreams:
    """One run seed split into independent named streams.

    Each stream carries a numpy ``Generator`` and a torch ``Generator`` so
    that both numpy-side bookkeeping and torch sampling are reproducible and
    checkpointable.
    """

    def __init__(self, seed: int, names: Sequence[str] = STREAM_NAMES):
        self.seed = int(seed)
        self.np: Dict[str, np.random.Generator] = {}
        self.torch: Dict[str, torch.Generator] = {}
        for name in names:
            s = _stream_seed(self.seed, name)
            self.np[name] = np.random.default_rng(s)
            g = torch.Generator()
            g.manual_seed(s & 0x7FFF_FFFF_FFFF_FFFF)
            self.torch[name] = g

    def __getitem__(self, name: str) -> torch.Generator:
        return self.torch[name]

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "np": {k: g.bit_generator.state for k, g in self.np.items()},
            "torch": {k: g.get_state() for k, g in self.torch.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        for k, st in state["np"].items():
            self.np[k].bit_generator.state = st
        for k, st in state["torch"].items():
            self.torch[k].set_state(st)


def derived_rng(*keys) -> np.random.Generator:
    """Fresh numpy generator keyed by an arbitrary tuple (e.g. seed, split, index)."""
    return np.random.default_rng(_stream_seed(0, ":".join(map(str, keys))))


def derived_torch_rng(*keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(_stream_seed(0, ":".join(map(str, keys))) & 0x7FFF_FFFF_FFFF_FFFF)
    return g
