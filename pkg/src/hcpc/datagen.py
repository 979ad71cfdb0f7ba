"""Synthetic two-level corpus: a Markov chain over units rendered as a 1-D signal.

Each unit id owns a fixed pattern (two sinusoids with their own frequencies,
phases and amplitudes, shaped by a per-unit envelope over the unit's span).
Units follow a seeded transition matrix with self-transitions forbidden, so
every label change is a boundary and every boundary is a label change.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .numerics import derived_rng

log = logging.getLogger(__name__)

DATASET_VERSION = 1
MAGIC = b"HCPC"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "valid", "test")


class DatasetError(RuntimeError):
    pass


@dataclass
class DataConfig:
    n_units: int = 12
    transition_temp: float = 0.5
    mean_dur_frames: float = 8.0
    min_dur_frames: int = 3
    hop: int = 16
    noise_std: float = 0.3
    seq_len_frames: int = 128
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.n_units < 2:
            raise ValueError("data.n_units must be >= 2")
        if self.transition_temp <= 0:
            raise ValueError("data.transition_temp must be > 0")
        if self.mean_dur_frames <= 1:
            raise ValueError("data.mean_dur_frames must be > 1")
        if self.min_dur_frames < 2:
            raise ValueError("data.min_dur_frames must be >= 2")
        if self.min_dur_frames > self.mean_dur_frames:
            raise ValueError("data.min_dur_frames must not exceed data.mean_dur_frames")
        if self.hop < 1:
            raise ValueError("data.hop must be >= 1")
        if self.noise_std < 0:
            raise ValueError("data.noise_std must be >= 0")
        for name in ("n_train", "n_valid", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"data.{name} must be >= 0")

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")


@dataclass
class UnitSequence:
    labels: List[int]
    durations: List[int]


@dataclass
class SignalExample:
    samples: np.ndarray  # float32, (seq_len_frames * hop,)
    frame_labels: np.ndarray  # int64, (seq_len_frames,)
    boundary_frames: np.ndarray  # int64, sorted, starts with 0

    @property
    def n_frames(self) -> int:
        return len(self.frame_labels)

    def equals(self, other: "SignalExample") -> bool:
        return (
            np.array_equal(self.samples, other.samples)
            and self.samples.dtype == other.samples.dtype
            and np.array_equal(self.frame_labels, other.frame_labels)
            and np.array_equal(self.boundary_frames, other.boundary_frames)
        )


@dataclass
class DatasetManifest:
    config: DataConfig
    splits: Dict[str, List[str]] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)
    version: int = DATASET_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": asdict(self.config),
            "splits": self.splits,
            "checksums": self.checksums,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            version=int(d["version"]),
            config=DataConfig(**d["config"]),
            splits={k: list(v) for k, v in d["splits"].items()},
            checksums=dict(d.get("checksums", {})),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# --- the generative tables -------------------------------------------------


def transition_matrix(cfg: DataConfig) -> np.ndarray:
    rng = derived_rng(cfg.seed, "transitions")
    logits = rng.standard_normal((cfg.n_units, cfg.n_units)) / cfg.transition_temp
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class UnitPattern:
    freqs: Tuple[float, float]  # cycles per frame
    phases: Tuple[float, float]
    amps: Tuple[float, float]
    curvature: float  # envelope: 1 - curvature * (2 tau - 1)^2 over the unit span

    def waveform(self, n_frames: int, hop: int) -> np.ndarray:
        n = np.arange(n_frames * hop, dtype=np.float64)
        tau = (n + 0.5) / (n_frames * hop)
        env = 1.0 - self.curvature * (2.0 * tau - 1.0) ** 2
        x = self.amps[0] * np.sin(2 * np.pi * self.freqs[0] * n / hop + self.phases[0])
        x += self.amps[1] * np.sin(2 * np.pi * self.freqs[1] * n / hop + self.phases[1])
        return env * x


def pattern_table(cfg: DataConfig, min_sep: float = 0.3) -> List[UnitPattern]:
    """Per-unit patterns; frequency pairs are kept at least ``min_sep`` apart."""
    rng = derived_rng(cfg.seed, "patterns")
    fmax = cfg.hop / 2 - 0.5
    table: List[UnitPattern] = []
    while len(table) < cfg.n_units:
        f = np.sort(rng.uniform(0.5, fmax, size=2))
        if f[1] - f[0] < min_sep:
            continue
        if any(max(abs(f[0] - p.freqs[0]), abs(f[1] - p.freqs[1])) < min_sep for p in table):
            continue
        table.append(
            UnitPattern(
                freqs=(float(f[0]), float(f[1])),
                phases=tuple(float(v) for v in rng.uniform(0, 2 * np.pi, size=2)),
                amps=tuple(float(v) for v in rng.uniform(0.5, 1.0, size=2)),
                curvature=float(rng.uniform(0.0, 0.6)),
            )
        )
    return table


# --- sampling --------------------------------------------------------------


def sample_unit_sequence(cfg: DataConfig, rng: np.random.Generator) -> UnitSequence:
    if cfg.seq_len_frames < cfg.min_dur_frames:
        raise DatasetError("sequence too short")
    trans = transition_matrix(cfg)
    lam = cfg.mean_dur_frames - cfg.min_dur_frames
    durations: List[int] = []
    total = 0
    while True:
        d = cfg.min_dur_frames + int(rng.poisson(lam))
        if total + d < cfg.seq_len_frames:
            durations.append(d)
            total += d
            continue
        rest = cfg.seq_len_frames - total
        if rest >= cfg.min_dur_frames:
            durations.append(rest)
            break
        # remainder too short to be a unit: drop the previous unit and redraw
        total -= durations.pop()

    labels = [int(rng.integers(cfg.n_units))]
    for _ in durations[1:]:
        labels.append(int(rng.choice(cfg.n_units, p=trans[labels[-1]])))
    return UnitSequence(labels=labels, durations=durations)


def render_signal(units: UnitSequence, cfg: DataConfig, rng: np.random.Generator) -> SignalExample:
    table = pattern_table(cfg)
    pieces = [table[u].waveform(d, cfg.hop) for u, d in zip(units.labels, units.durations)]
    x = np.concatenate(pieces)
    if cfg.noise_std > 0:
        x = x + rng.normal(0.0, cfg.noise_std, size=x.shape)
    peak = np.abs(x).max()
    if peak > 0:
        x = x / peak
    frame_labels = np.repeat(np.asarray(units.labels, dtype=np.int64), units.durations)
    starts = np.concatenate([[0], np.cumsum(units.durations)[:-1]]).astype(np.int64)
    return SignalExample(
        samples=x.astype(np.float32), frame_labels=frame_labels, boundary_frames=starts
    )


def generate_example(cfg: DataConfig, split: str, index: int) -> SignalExample:
    rng = derived_rng(cfg.seed, split, index)
    return render_signal(sample_unit_sequence(cfg, rng), cfg, rng)


def generate_dataset(cfg: DataConfig) -> Tuple[DatasetManifest, Dict[str, List[SignalExample]]]:
    cfg.validate()
    examples = {
        split: [generate_example(cfg, split, i) for i in range(cfg.split_size(split))]
        for split in SPLITS
    }
    return DatasetManifest(config=cfg), examples


def corpus_stats(examples: Sequence[SignalExample], n_units: int) -> dict:
    durations = []
    hist = np.zeros(n_units, dtype=np.int64)
    for ex in examples:
        b = np.append(ex.boundary_frames, ex.n_frames)
        durations.extend(np.diff(b).tolist())
        np.add.at(hist, ex.frame_labels[ex.boundary_frames], 1)
    return {
        "n_examples": len(examples),
        "n_units_total": len(durations),
        "mean_unit_duration": float(np.mean(durations)) if durations else float("nan"),
        "unit_histogram": hist.tolist(),
    }


# --- persistence -----------------------------------------------------------


def encode_example(ex: SignalExample) -> bytes:
    samples = np.ascontiguousarray(ex.samples, dtype="<f4")
    parts = [MAGIC, struct.pack("<II", DATASET_VERSION, samples.ndim)]
    parts.append(struct.pack(f"<{samples.ndim}I", *samples.shape))
    parts.append(samples.tobytes())
    for arr in (ex.frame_labels, ex.boundary_frames):
        arr = np.asarray(arr, dtype="<u4")
        parts.append(struct.pack("<I", len(arr)))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_example(blob: bytes, name: str = "<bytes>") -> SignalExample:
    def need(nbytes, off):
        if off + nbytes > len(blob):
            raise DatasetError(f"corrupt example: {name} is truncated")

    def take(fmt, off):
        size = struct.calcsize(fmt)
        need(size, off)
        return struct.unpack_from(fmt, blob, off), off + size

    if blob[:4] != MAGIC:
        raise DatasetError(f"corrupt example: {name} has bad magic")
    (version, ndim), off = take("<II", 4)
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version} in {name}")
    dims, off = take(f"<{ndim}I", off)
    count = int(np.prod(dims))
    need(4 * count, off)
    samples = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
    off += 4 * count
    arrays = []
    for _ in range(2):
        (n,), off = take("<I", off)
        need(4 * n, off)
        arrays.append(np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64))
        off += 4 * n
    if off != len(blob):
        raise DatasetError(f"corrupt example: {name} has trailing bytes")
    return SignalExample(
        samples=samples.astype(np.float32), frame_labels=arrays[0], boundary_frames=arrays[1]
    )


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_dataset(
    manifest: DatasetManifest, examples: Dict[str, List[SignalExample]], directory
) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest.splits = {}
    manifest.checksums = {}
    for split, exs in examples.items():
        names = []
        for i, ex in enumerate(exs):
            name = f"ex_{split}_{i}.bin"
            blob = encode_example(ex)
            _atomic_write(directory / name, blob)
            manifest.checksums[name] = hashlib.sha256(blob).hexdigest()
            names.append(name)
        manifest.splits[split] = names
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    _atomic_write(directory / MANIFEST_NAME, text.encode())
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"missing manifest in {directory}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest: {e}") from e
    if d.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {d.get('version')}")
    return DatasetManifest.from_dict(d)


def read_dataset(
    directory, splits: Sequence[str] | None = None
) -> Tuple[DatasetManifest, Dict[str, List[SignalExample]]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    wanted = list(manifest.splits) if splits is None else list(splits)
    missing = [n for s in wanted for n in manifest.splits.get(s, []) if not (directory / n).exists()]
    if missing:
        raise DatasetError("missing example files: " + ", ".join(missing))
    examples = {}
    for split in wanted:
        exs = []
        for name in manifest.splits.get(split, []):
            blob = (directory / name).read_bytes()
            expected = manifest.checksums.get(name)
            if expected is not None and hashlib.sha256(blob).hexdigest() != expected:
                raise DatasetError(f"corrupt example: checksum mismatch for {name}")
            exs.append(decode_example(blob, name))
        examples[split] = exs
    return manifest, examples


def stack_split(examples: Sequence[SignalExample]) -> Tuple[np.ndarray, np.ndarray]:
    """Samples (N, L) and frame labels (N, T) as dense arrays."""
    return (
        np.stack([ex.samples for ex in examples]),
        np.stack([ex.frame_labels for ex in examples]),
    )
