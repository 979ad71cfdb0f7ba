"""Two-phase training: frame-level pretraining, then the joint objective."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .datagen import DatasetManifest, SignalExample, read_dataset
from .frame_cpc import cpc_low_loss, sample_negatives_batch
from .model import HierarchicalCPC
from .numerics import RngStreams, derived_rng, derived_torch_rng
from .segmenter import (
    ReinforceBaseline,
    pool_segments,
    policy_gradient,
    rate_regularizer,
    sample_boundaries,
    sample_windows,
)
from .unit_cpc import (
    cpc_high_loss,
    kmeans_loss,
    quantize,
    sample_random_unit_negatives,
    straight_through,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_FILE = "metrics.log"
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Batch:
    samples: torch.Tensor  # (B, L)
    labels: torch.Tensor  # (B, T)
    boundaries: List[List[int]]


def make_batch(examples: List[SignalExample], dtype=torch.float32) -> Batch:
    return Batch(
        samples=torch.as_tensor(np.stack([e.samples for e in examples])).to(dtype),
        labels=torch.as_tensor(np.stack([e.frame_labels for e in examples])),
        boundaries=[e.boundary_frames.tolist() for e in examples],
    )


@dataclass
class StepOutput:
    total: torch.Tensor
    parts: Dict[str, torch.Tensor]
    stats: Dict[str, float] = field(default_factory=dict)
    pending_codebook: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


def total_loss(
    batch: Batch,
    model: HierarchicalCPC,
    phase: str,
    rng: RngStreams,
    baseline: ReinforceBaseline,
) -> StepOutput:
    """Weighted objective for one batch.

    pretrain: w_L * L_L. joint: adds w_H * L_H, w_Q * L_Q and, when the
    policy is active, w_pi * L_pi (REINFORCE surrogate, reward = L_H per
    sequence, detached) and w_reg * L_reg.
    """
    if phase not in ("pretrain", "joint"):
        raise ValueError(f"unknown phase {phase!r}")
    cfg = model.cfg
    tc = cfg.train
    x = batch.samples
    B = x.shape[0]

    z, c, preds = model.frame(x)
    T = z.shape[1]
    neg = sample_negatives_batch(B, T, cfg.frame.n_predictions, cfg.frame.n_negatives, rng["negatives"])
    parts = {"L_L": cpc_low_loss(z, preds, neg)}
    total = tc.w_L * parts["L_L"]
    if phase == "pretrain":
        return StepOutput(total=total, parts=parts)

    mode = cfg.segmenter.mode
    policy_active = mode == "policy"
    stats = {}
    if policy_active:
        p = model.policy(z)
        b, logp = sample_boundaries(p, "policy", generator=rng["policy"])
        stats["mean_p"] = float(p.detach().mean())
    else:
        b, _ = sample_boundaries(
            z.new_full((B, T), 0.5), mode, ground_truth=batch.boundaries, fixed_rate_k=cfg.segmenter.fixed_rate_k
        )
    s, seg = pool_segments(z, b)
    stats["segments_per_seq"] = float(seg.n_segments.double().mean())

    unit = model.unit
    u, h, hpreds = unit(s, seg.mask)
    pending = None
    if cfg.unit.quantize_targets:
        if not bool(unit.codebook.initialized):
            unit.codebook.init_from(u.detach()[seg.mask], rng["quantizer"])
        idx, e = quantize(u, unit.codebook.embeddings)
        targets = straight_through(u, e)
        parts["L_Q"] = kmeans_loss(u, e, cfg.unit.lam, seg.mask, cfg.unit.commitment_sign)
        pending = (u.detach()[seg.mask], idx[seg.mask])
    else:
        targets = u

    neg_units = None
    if cfg.unit.negatives == "random":
        neg_units = sample_random_unit_negatives(seg.n_segments, seg.max_segments, cfg.unit.M, rng["negatives"])
    L_H, per_seq, n_short = cpc_high_loss(targets, hpreds, seg.n_segments, neg_units)
    parts["L_H"] = L_H
    stats["too_short"] = float(n_short)
    total = total + tc.w_H * L_H
    if "L_Q" in parts:
        total = total + tc.w_Q * parts["L_Q"]

    if policy_active:
        parts["L_pi"] = policy_gradient(logp, per_seq, baseline)
        windows = sample_windows(B, T, int(round(cfg.segmenter.l_bar)), cfg.segmenter.n_windows, rng["windows"])
        parts["L_reg"] = rate_regularizer(p, cfg.segmenter.l_bar, windows)
        total = total + tc.w_pi * parts["L_pi"] + tc.w_reg * parts["L_reg"]
    return StepOutput(total=total, parts=parts, stats=stats, pending_codebook=pending)


# --- checkpoints -----------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0
    rollbacks: int = 0


def save_checkpoint(path, model, optimizer, rng: RngStreams, baseline, state: TrainState, extra: dict) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng.state_dict() if rng is not None else None,
        "baseline": baseline.state_dict() if baseline is not None else None,
        "state": asdict(state),
        "extra": extra,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises a variety of errors on truncated zips
        raise CheckpointError(f"corrupt checkpoint: {path}") from e
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"corrupt checkpoint: {path}")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload['version']}")
    return payload


def model_from_checkpoint(payload: dict) -> HierarchicalCPC:
    cfg = RunConfig.from_dict(payload["config"])
    model = HierarchicalCPC(cfg).to(DTYPES[cfg.train.dtype])
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"ckpt_epoch_{epoch:03d}.pt"


def latest_checkpoint(out_dir) -> Optional[Path]:
    found = sorted(Path(out_dir).glob("ckpt_epoch_*.pt"))
    return found[-1] if found else None


# --- training loop ---------------------------------------------------------


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = derived_rng(seed, "shuffle", epoch).permutation(n)
    for i in range(0, n - batch_size + 1, batch_size):
        yield order[i : i + batch_size]


def lr_scale(step: int, steps_per_epoch: int, warmup_epochs: int) -> float:
    warm = warmup_epochs * steps_per_epoch
    return 1.0 if warm == 0 else min(1.0, (step + 1) / warm)


@torch.no_grad()
def heldout_low_loss(model: HierarchicalCPC, examples: List[SignalExample], batch_size: int = 64) -> float:
    """L_L on a split with negatives from a fixed generator (comparable across epochs)."""
    if not examples:
        return float("nan")
    dtype = next(model.parameters()).dtype
    g = derived_torch_rng("heldout-negatives")
    cfg = model.cfg.frame
    total, n = 0.0, 0
    for i in range(0, len(examples), batch_size):
        batch = make_batch(examples[i : i + batch_size], dtype)
        z, _, preds = model.frame(batch.samples)
        neg = sample_negatives_batch(z.shape[0], z.shape[1], cfg.n_predictions, cfg.n_negatives, g)
        total += float(cpc_low_loss(z, preds, neg)) * z.shape[0]
        n += z.shape[0]
    return total / n


class Trainer:
    """Runs pretrain then joint epochs, one checkpoint and metrics record per epoch.

    Resumes from the newest checkpoint in ``out_dir`` when one exists.
    """

    def __init__(self, cfg: RunConfig, dataset_dir, out_dir, max_epochs: Optional[int] = None):
        self.cfg = cfg.validate()
        self.dataset_dir = Path(dataset_dir)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.max_epochs = max_epochs
        self.manifest, data = read_dataset(self.dataset_dir, ["train", "valid"])
        self.train_set = data["train"]
        self.valid_set = data["valid"]
        if self.manifest.config.hop != cfg.frame.hop:
            raise TrainingError("dataset hop does not match frame encoder strides")

        self.dtype = DTYPES[cfg.train.dtype]
        torch.manual_seed(cfg.train.seed)
        self.model = HierarchicalCPC(cfg).to(self.dtype)
        self.optimizer = torch.optim.Adam(self.model.param_groups(cfg.train.lr, cfg.train.policy_lr_mult))
        self.rng = RngStreams(cfg.train.seed)
        self.baseline = ReinforceBaseline(cfg.segmenter.baseline_momentum)
        self.state = TrainState()
        self.fingerprint = {
            "dataset": self.manifest.fingerprint(),
            "config": cfg.fingerprint(exclude=["train.joint_epochs", "train.pretrain_epochs"]),
        }

    @property
    def total_epochs(self) -> int:
        return self.cfg.train.pretrain_epochs + self.cfg.train.joint_epochs

    def phase(self, epoch: int) -> str:
        return "pretrain" if epoch < self.cfg.train.pretrain_epochs else "joint"

    def resume(self, path=None) -> bool:
        path = path or latest_checkpoint(self.out_dir)
        if path is None:
            return False
        payload = load_checkpoint(path)
        if payload["extra"].get("fingerprint") != self.fingerprint:
            raise CheckpointError("resume mismatch: dataset or config differs from checkpoint")
        self.load_payload(payload)
        log.info("resumed from %s at epoch %d", path, self.state.epoch)
        return True

    def warm_start(self, path) -> None:
        """Continue from a checkpoint written during the pretrain phase of a
        run whose config may differ in joint-phase settings (ablations, modes).

        Pretraining touches only the frame-level loss, so runs that share data,
        seed and frame config share their pretrain checkpoints.
        """
        payload = load_checkpoint(path)
        if payload["extra"].get("fingerprint", {}).get("dataset") != self.fingerprint["dataset"]:
            raise CheckpointError("resume mismatch: checkpoint was trained on a different dataset")
        if payload["state"]["epoch"] > self.cfg.train.pretrain_epochs:
            raise CheckpointError("warm start needs a checkpoint from the pretrain phase")
        src = RunConfig.from_dict(payload["config"])
        if src.frame != self.cfg.frame or src.train.seed != self.cfg.train.seed:
            raise CheckpointError("resume mismatch: frame config or seed differs")
        # only the frame level has trained; the rest keeps this run's own init
        prefix = "frame."
        self.model.frame.load_state_dict(
            {k[len(prefix):]: v for k, v in payload["model"].items() if k.startswith(prefix)}
        )
        n_frame = len(list(self.model.frame.parameters()))  # frame params lead group 0
        opt = self.optimizer.state_dict()
        opt["state"] = {i: v for i, v in payload["optimizer"]["state"].items() if i < n_frame}
        self.optimizer.load_state_dict(opt)
        self.rng.load_state_dict(payload["rng"])
        self.baseline.load_state_dict(payload["baseline"])
        self.state = TrainState(**payload["state"])

    def load_payload(self, payload: dict) -> None:
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        # learning rates come from the current config, not the saved groups
        fresh = self.model.param_groups(self.cfg.train.lr, self.cfg.train.policy_lr_mult)
        for group, ref in zip(self.optimizer.param_groups, fresh):
            group["lr"] = group["base_lr"] = ref["base_lr"]
        self.rng.load_state_dict(payload["rng"])
        self.baseline.load_state_dict(payload["baseline"])
        self.state = TrainState(**payload["state"])

    def save(self) -> Path:
        path = checkpoint_path(self.out_dir, self.state.epoch)
        save_checkpoint(
            path, self.model, self.optimizer, self.rng, self.baseline, self.state,
            {"fingerprint": self.fingerprint, "phase": self.phase(self.state.epoch - 1)},
        )
        return path

    def _write_metrics(self, record: dict) -> None:
        with open(self.out_dir / METRICS_FILE, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def _snapshot(self):
        return {k: v.clone() for k, v in self.model.state_dict().items()}

    def train_step(self, batch: Batch, phase: str, steps_per_epoch: int) -> Optional[StepOutput]:
        tc = self.cfg.train
        scale = lr_scale(self.state.step, steps_per_epoch, tc.warmup_epochs)
        for group in self.optimizer.param_groups:
            group["lr"] = group["base_lr"] * scale
        self.model.train()
        out = total_loss(batch, self.model, phase, self.rng, self.baseline)
        finite = all(torch.isfinite(v).all() for v in out.parts.values())
        if finite:
            snapshot = self._snapshot()
            self.optimizer.zero_grad(set_to_none=True)
            out.total.backward()
            params = [p for g in self.optimizer.param_groups for p in g["params"] if p.grad is not None]
            gnorm = torch.nn.utils.clip_grad_norm_(params, tc.grad_clip) if tc.grad_clip > 0 else None
            finite = gnorm is None or bool(torch.isfinite(gnorm))
            if finite:
                self.optimizer.step()
                finite = all(torch.isfinite(p).all() for p in self.model.parameters())
                if not finite:
                    self.model.load_state_dict(snapshot)
        if not finite:
            self.state.rollbacks += 1
            log.warning("non-finite step %d rolled back (%d so far)", self.state.step, self.state.rollbacks)
            if self.state.rollbacks > tc.max_rollbacks:
                raise TrainingError("training collapsed: too many non-finite steps")
            return None
        if out.pending_codebook is not None:
            x, idx = out.pending_codebook
            self.model.unit.codebook.ema_update(x, idx, self.rng.torch["quantizer"])
        self.state.step += 1
        return out

    def run_epoch(self) -> dict:
        epoch = self.state.epoch
        phase = self.phase(epoch)
        tc = self.cfg.train
        n = len(self.train_set)
        steps_per_epoch = max(n // tc.batch_size, 1)
        sums: Dict[str, float] = {}
        counts: Dict[str, int] = {}
        t0 = time.time()
        for i, idx in enumerate(epoch_batches(n, tc.batch_size, tc.seed, epoch)):
            batch = make_batch([self.train_set[j] for j in idx], self.dtype)
            out = self.train_step(batch, phase, steps_per_epoch)
            if out is None:
                continue
            for k, v in list(out.parts.items()) + list(out.stats.items()):
                sums[k] = sums.get(k, 0.0) + float(v.detach() if torch.is_tensor(v) else v)
                counts[k] = counts.get(k, 0) + 1
            if tc.log_every and (i + 1) % tc.log_every == 0:
                self._write_metrics(self._record(epoch, phase, sums, counts, t0, interim=True))
        self.model.eval()
        record = self._record(epoch, phase, sums, counts, t0)
        record["valid_L_L"] = heldout_low_loss(self.model, self.valid_set)
        self.state.epoch += 1
        self._write_metrics(record)
        return record

    def _record(self, epoch, phase, sums, counts, t0, interim=False) -> dict:
        rec = {"epoch": epoch, "step": self.state.step, "phase": phase}
        for k in sorted(sums):
            rec[k] = sums[k] / counts[k]
        rec["wall_clock"] = round(time.time() - t0, 3)
        if interim:
            rec["interim"] = True
        return rec

    def fit(self) -> List[dict]:
        records = []
        end = self.total_epochs if self.max_epochs is None else min(self.total_epochs, self.max_epochs)
        while self.state.epoch < end:
            rec = self.run_epoch()
            self.save()
            log.info("epoch %d %s", rec["epoch"], {k: round(v, 4) for k, v in rec.items() if isinstance(v, float)})
            records.append(rec)
        return records


def train(cfg: RunConfig, dataset_dir, out_dir, resume: bool = True, max_epochs: Optional[int] = None) -> Trainer:
    trainer = Trainer(cfg, dataset_dir, out_dir, max_epochs=max_epochs)
    if resume:
        trainer.resume()
    trainer.fit()
    return trainer


def read_metrics(out_dir) -> List[dict]:
    path = Path(out_dir) / METRICS_FILE
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
