"""Boundary detection metrics, linear probing and clustering scores."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import SignalExample
from .numerics import derived_torch_rng

log = logging.getLogger(__name__)


# --- boundaries ------------------------------------------------------------


def match_boundaries(pred: Sequence[int], ref: Sequence[int], tol: int) -> int:
    """Greedy one-to-one matching, scanning ref in order.

    Each reference boundary takes the nearest still-unmatched prediction
    within +-tol (ties to the earlier prediction). This is the usual
    community matcher; it can fall short of a maximum matching when
    tolerance windows of neighbouring references overlap.
    """
    pred = list(pred)
    used = [False] * len(pred)
    hits = 0
    for r in ref:
        best, best_d = -1, tol + 1
        for j, p in enumerate(pred):
            d = abs(p - r)
            if not used[j] and d < best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
            hits += 1
    return hits


def rvalue(precision: float, recall: float) -> Tuple[float, float, bool]:
    """(over-segmentation, R-value, degenerate flag) on the fraction scale.

    With zero precision the R-value is defined as 0 and the flag is set.
    """
    if precision <= 0:
        return float("nan"), 0.0, True
    os_ = recall / precision - 1.0
    r1 = math.sqrt((1.0 - recall) ** 2 + os_**2)
    r2 = (-os_ + recall - 1.0) / math.sqrt(2.0)
    return os_, 1.0 - (abs(r1) + abs(r2)) / 2.0, False


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class BoundaryMetrics:
    precision: float
    recall: float
    f1: float
    os: float
    r_value: float
    hits: int
    n_pred: int
    n_ref: int
    precision_undefined: bool = False

    @classmethod
    def from_counts(cls, hits: int, n_pred: int, n_ref: int) -> "BoundaryMetrics":
        if n_pred == 0 and n_ref == 0:
            precision = recall = 1.0
        else:
            precision = hits / n_pred if n_pred else 0.0
            recall = hits / n_ref if n_ref else 0.0
        os_, r, flag = rvalue(precision, recall)
        return cls(
            precision=precision,
            recall=recall,
            f1=f1_score(precision, recall),
            os=os_,
            r_value=r,
            hits=hits,
            n_pred=n_pred,
            n_ref=n_ref,
            precision_undefined=flag or n_pred == 0,
        )


def boundary_metrics(
    pred_sets: Sequence[Sequence[int]],
    ref_sets: Sequence[Sequence[int]],
    tol: int = 2,
    average: str = "micro",
) -> BoundaryMetrics:
    """Corpus-level P/R/F1/R-value from pooled hit counts ("micro"), or the
    mean of per-example P and R ("macro") before deriving F1 and R-value."""
    if len(pred_sets) != len(ref_sets):
        raise ValueError(f"example count mismatch: {len(pred_sets)} predictions vs {len(ref_sets)} references")
    counts = [(match_boundaries(p, r, tol), len(p), len(r)) for p, r in zip(pred_sets, ref_sets)]
    hits, n_pred, n_ref = (sum(c[i] for c in counts) for i in range(3))
    if average == "micro":
        return BoundaryMetrics.from_counts(hits, n_pred, n_ref)
    if average != "macro":
        raise ValueError(f"unknown averaging {average!r}")
    per = [BoundaryMetrics.from_counts(*c) for c in counts]
    precision = float(np.mean([m.precision for m in per])) if per else 1.0
    recall = float(np.mean([m.recall for m in per])) if per else 1.0
    os_, r, flag = rvalue(precision, recall)
    return BoundaryMetrics(precision, recall, f1_score(precision, recall), os_, r, hits, n_pred, n_ref, flag)


def interior(boundaries: Sequence[int]) -> List[int]:
    """Drop the sequence-start boundary, which every segmentation has for free."""
    return [int(b) for b in boundaries if b != 0]


# --- clustering ------------------------------------------------------------


@dataclass
class ClusterScores:
    nmi: float
    purity: float


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def cluster_scores(unit_ids: Sequence[int], ref_labels: Sequence[int]) -> ClusterScores:
    """NMI (arithmetic normalisation) and purity of discovered ids against true units."""
    a = np.asarray(unit_ids)
    b = np.asarray(ref_labels)
    if a.shape != b.shape:
        raise ValueError("unit_ids and ref_labels must be aligned")
    if a.size == 0:
        return ClusterScores(nmi=0.0, purity=0.0)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    purity = float(table.max(axis=1).sum() / a.size)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if table.shape[0] == 1 or table.shape[1] == 1:
        return ClusterScores(nmi=0.0, purity=purity)
    pij = table / a.size
    outer = np.outer(pij.sum(1), pij.sum(0))
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return ClusterScores(nmi=max(0.0, mi / ((ha + hb) / 2)), purity=purity)


def segment_majority_labels(frame_labels: np.ndarray, spans: Sequence[Tuple[int, int]]) -> List[int]:
    out = []
    for s, e in spans:
        vals, counts = np.unique(frame_labels[s:e], return_counts=True)
        out.append(int(vals[counts.argmax()]))
    return out


# --- linear probe ----------------------------------------------------------


@dataclass
class ProbeResult:
    frame_accuracy: float
    per_class: List[Optional[float]]
    n_train: int
    n_test: int


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
    epochs: int = 10,
    lr: float = 0.01,
    batch_size: int = 4096,
    seed: int = 0,
) -> ProbeResult:
    """Multinomial logistic regression on frozen features, minibatch Adam.

    Features are standardized with train-split statistics.
    """
    xtr = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    xte = torch.as_tensor(np.asarray(test_x), dtype=torch.float32)
    ytr = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    yte = torch.as_tensor(np.asarray(test_y), dtype=torch.long)
    mean, std = xtr.mean(0), xtr.std(0).clamp(min=1e-6)
    xtr, xte = (xtr - mean) / std, (xte - mean) / std

    g = derived_torch_rng("probe", seed)
    W = torch.zeros(xtr.shape[1], n_classes, requires_grad=True)
    bias = torch.zeros(n_classes, requires_grad=True)
    opt = torch.optim.Adam([W, bias], lr=lr)
    n = xtr.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            loss = F.cross_entropy(xtr[idx] @ W + bias, ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = (xte @ W + bias).argmax(-1)
    correct = (pred == yte).numpy()
    present = set(np.unique(ytr.numpy()).tolist())
    per_class: List[Optional[float]] = []
    for k in range(n_classes):
        sel = yte.numpy() == k
        if k not in present:
            if sel.any():
                log.warning("class %d absent from probe train split; excluded from per-class report", k)
            per_class.append(None)
        else:
            per_class.append(float(correct[sel].mean()) if sel.any() else None)
    return ProbeResult(
        frame_accuracy=float(correct.mean()) if correct.size else 0.0,
        per_class=per_class,
        n_train=int(n),
        n_test=int(correct.size),
    )


# --- model-level evaluation ------------------------------------------------


@dataclass
class Extracted:
    c: np.ndarray  # (N, T, d)
    h_frames: np.ndarray  # (N, T, d')
    labels: np.ndarray  # (N, T)
    pred_boundaries: List[List[int]]
    ref_boundaries: List[List[int]]
    codes: List[List[int]]
    segment_labels: List[List[int]]
    mean_p: float


@torch.no_grad()
def extract(model, examples: Sequence[SignalExample], batch_size: int = 64, mode: Optional[str] = None) -> Extracted:
    from .trainer import make_batch

    dtype = next(model.parameters()).dtype
    model.eval()
    cs, hs, pb, codes, seg_labels, ps = [], [], [], [], [], []
    g = derived_torch_rng("eval-sampling")
    for i in range(0, len(examples), batch_size):
        chunk = list(examples[i : i + batch_size])
        batch = make_batch(chunk, dtype)
        a = model.analyze(batch.samples, ground_truth=batch.boundaries, mode=mode, generator=g)
        cs.append(a.c.float().numpy())
        hs.append(a.h_frames.float().numpy())
        ps.append(float(a.p.mean()))
        for j, ex in enumerate(chunk):
            spans = a.seg.spans(j)
            pb.append([s for s, _ in spans])
            n = int(a.seg.n_segments[j])
            codes.append(a.codes[j, :n].tolist() if a.codes is not None else [])
            seg_labels.append(segment_majority_labels(ex.frame_labels, spans))
    return Extracted(
        c=np.concatenate(cs),
        h_frames=np.concatenate(hs),
        labels=np.stack([ex.frame_labels for ex in examples]),
        pred_boundaries=pb,
        ref_boundaries=[ex.boundary_frames.tolist() for ex in examples],
        codes=codes,
        segment_labels=seg_labels,
        mean_p=float(np.mean(ps)),
    )


def evaluate_model(
    model,
    eval_examples: Sequence[SignalExample],
    probe_examples: Sequence[SignalExample],
    n_classes: int,
    tol: int = 2,
    probe_epochs: int = 10,
    mode: Optional[str] = None,
) -> dict:
    """All desk-scale evaluations in one report dictionary."""
    ev = extract(model, eval_examples, mode=mode)
    tr = extract(model, probe_examples, mode=mode)
    bm = boundary_metrics(
        [interior(p) for p in ev.pred_boundaries], [interior(r) for r in ev.ref_boundaries], tol
    )
    flat = lambda a: a.reshape(-1, a.shape[-1])
    probe_c = linear_probe(flat(tr.c), tr.labels.reshape(-1), flat(ev.c), ev.labels.reshape(-1), n_classes, probe_epochs)
    probe_h = linear_probe(
        flat(tr.h_frames), tr.labels.reshape(-1), flat(ev.h_frames), ev.labels.reshape(-1), n_classes, probe_epochs
    )
    all_codes = [c for seq in ev.codes for c in seq]
    all_refs = [r for seq in ev.segment_labels for r in seq]
    clusters = cluster_scores(all_codes, all_refs) if all_codes else ClusterScores(0.0, 0.0)
    n_segments = [len(p) for p in ev.pred_boundaries]
    return {
        "boundary": asdict(bm),
        "tolerance_frames": tol,
        "probe_frame_c": asdict(probe_c),
        "probe_frame_h": asdict(probe_h),
        "clusters": asdict(clusters),
        "mean_segments_per_seq": float(np.mean(n_segments)),
        "mean_segment_length": float(ev.labels.shape[1] / np.mean(n_segments)),
        "mean_boundary_prob": ev.mean_p,
        "segmentation_mode": mode or model.inference_mode(),
        "n_examples": len(eval_examples),
    }


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n")


def format_boundary_line(example_id: str, frames: Sequence[int]) -> str:
    return f"{example_id}: " + " ".join(str(int(f)) for f in frames)


def parse_boundary_line(line: str) -> Tuple[str, List[int]]:
    key, _, rest = line.partition(":")
    return key.strip(), [int(v) for v in rest.split()]
