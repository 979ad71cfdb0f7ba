"""Command-line entry point: generate, train, eval, segment.

Exit codes: 0 ok, 1 training collapse, 2 configuration error, 3 filesystem
problem, 4 checkpoint/dataset incompatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import List, Optional

from .config import ABLATIONS, ConfigError, RunConfig, dump_config, load_config
from .datagen import DatasetError, corpus_stats, generate_dataset, read_dataset, read_manifest, write_dataset

EXIT_OK, EXIT_COLLAPSE, EXIT_CONFIG, EXIT_FS, EXIT_COMPAT = 0, 1, 2, 3, 4
CONFIG_ECHO = "config.yaml"

log = logging.getLogger("hcpc")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("HCPC_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(f"HCPC_SEED: invalid integer {env!r}", EXIT_CONFIG) from None


def _config(args, seed_field: str) -> RunConfig:
    overrides = list(args.set or [])
    seed = _seed(args)
    if seed is not None:
        overrides.append(f"{seed_field}={seed}")
    try:
        return load_config(args.config, overrides)
    except ConfigError as e:
        raise CliError(f"config error: {e}", EXIT_CONFIG) from None


def _prepare_out(path: str, force: bool, allow_resume: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory", EXIT_FS)
    if out.exists() and any(out.iterdir()):
        resumable = allow_resume and any(out.glob("ckpt_epoch_*.pt"))
        if force:
            shutil.rmtree(out)
        elif not resumable:
            raise CliError(f"{out} is not empty (use --force to overwrite)", EXIT_FS)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {out}: {e}", EXIT_FS) from None
    return out


def _read_data(path: str, splits: List[str]):
    try:
        return read_dataset(path, splits)
    except DatasetError as e:
        msg = str(e)
        code = EXIT_COMPAT if "version" in msg else EXIT_FS
        raise CliError(f"dataset error: {msg}", code) from None


def _load_model(ckpt: str, data_dir: str):
    from .trainer import CheckpointError, load_checkpoint, model_from_checkpoint

    try:
        payload = load_checkpoint(ckpt)
    except CheckpointError as e:
        msg = str(e)
        code = EXIT_FS if "not found" in msg else EXIT_COMPAT
        raise CliError(msg, code) from None
    try:
        manifest = read_manifest(data_dir)
    except DatasetError as e:
        raise CliError(f"dataset error: {e}", EXIT_FS) from None
    model = model_from_checkpoint(payload)
    cfg = model.cfg
    if manifest.config.hop != cfg.frame.hop:
        raise CliError(
            f"checkpoint expects hop {cfg.frame.hop}, dataset has hop {manifest.config.hop}", EXIT_COMPAT
        )
    if manifest.config.n_units != cfg.data.n_units:
        raise CliError(
            f"checkpoint was trained with {cfg.data.n_units} units, dataset has {manifest.config.n_units}",
            EXIT_COMPAT,
        )
    return model, manifest


# --- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args, "data.seed")
    out = _prepare_out(args.out, args.force)
    manifest, examples = generate_dataset(cfg.data)
    write_dataset(manifest, examples, out)
    dump_config(cfg, out / CONFIG_ECHO)
    stats = corpus_stats(examples["train"], cfg.data.n_units)
    print(f"wrote {sum(len(v) for v in examples.values())} examples to {out}")
    print(f"mean unit duration: {stats['mean_unit_duration']:.3f} frames")
    print("unit histogram: " + " ".join(str(c) for c in stats["unit_histogram"]))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import CheckpointError, Trainer, TrainingError

    cfg = _config(args, "train.seed")
    if args.mode:
        cfg.segmenter.mode = args.mode
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    try:
        cfg.validate()
    except ConfigError as e:
        raise CliError(f"config error: {e}", EXIT_CONFIG) from None
    _read_data(args.data, [])  # manifest sanity before touching the output directory
    out = _prepare_out(args.out, args.force, allow_resume=True)
    dump_config(cfg, out / CONFIG_ECHO)
    try:
        trainer = Trainer(cfg, args.data, out, max_epochs=args.max_epochs)
        if args.warm_start:
            if any(out.glob("ckpt_epoch_*.pt")):
                trainer.resume()
            else:
                trainer.warm_start(args.warm_start)
        else:
            trainer.resume()
        records = trainer.fit()
    except CheckpointError as e:
        raise CliError(str(e), EXIT_COMPAT) from None
    except TrainingError as e:
        raise CliError(str(e), EXIT_COLLAPSE) from None
    except DatasetError as e:
        raise CliError(f"dataset error: {e}", EXIT_FS) from None
    if records:
        last = records[-1]
        summary = {k: round(v, 4) for k, v in last.items() if isinstance(v, float)}
        print(f"epoch {last['epoch']} ({last['phase']}): {summary}")
    print(f"checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, write_report

    model, manifest = _load_model(args.ckpt, args.data)
    splits = [args.split, args.probe_split]
    _, data = _read_data(args.data, sorted(set(splits)))
    eval_set = data[args.split][: args.limit] if args.limit else data[args.split]
    probe_set = data[args.probe_split][: args.probe_limit]
    if not eval_set:
        raise CliError(f"split '{args.split}' is empty", EXIT_FS)
    report = evaluate_model(
        model, eval_set, probe_set, manifest.config.n_units, tol=args.tol, probe_epochs=args.probe_epochs,
        mode=args.mode,
    )
    report["checkpoint"] = str(args.ckpt)
    report["split"] = args.split
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_report(report, path)
    b = report["boundary"]
    print(
        f"P {b['precision']:.4f} R {b['recall']:.4f} F1 {b['f1']:.4f} R-val {b['r_value']:.4f} | "
        f"probe c {report['probe_frame_c']['frame_accuracy']:.4f} "
        f"probe h {report['probe_frame_h']['frame_accuracy']:.4f} | NMI {report['clusters']['nmi']:.4f}"
    )
    return EXIT_OK


def cmd_segment(args) -> int:
    from .evaluation import extract, format_boundary_line

    model, manifest = _load_model(args.ckpt, args.data)
    _, data = _read_data(args.data, [args.split])
    out = _prepare_out(args.out, args.force)
    dump_config(model.cfg, out / CONFIG_ECHO)
    examples = data[args.split]
    ids = [Path(name).stem for name in manifest.splits[args.split]]
    ex = extract(model, examples, mode=args.mode)
    with open(out / "boundaries.txt", "w") as fb, open(out / "units.txt", "w") as fu:
        for key, frames, codes in zip(ids, ex.pred_boundaries, ex.codes):
            fb.write(format_boundary_line(key, frames) + "\n")
            fu.write(format_boundary_line(key, codes) + "\n")
    meta = {"split": args.split, "n_examples": len(examples), "n_frames": int(ex.labels.shape[1])}
    (out / "segments.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote segmentations of {len(examples)} examples to {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcpc", description="Two-level contrastive coding with learned segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, repeatable")
        p.add_argument("--seed", type=int, help="seed (falls back to $HCPC_SEED)")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="pretrain + joint training, resuming from --out if possible")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["policy", "oracle", "fixed_rate"])
    p.add_argument("--ablation", choices=list(ABLATIONS))
    p.add_argument("--warm-start", help="start from a pretrain-phase checkpoint of a compatible run")
    p.add_argument("--max-epochs", type=int, help="stop after this many total epochs")
    p.add_argument("--force", action="store_true", help="discard an existing run in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="boundary metrics, linear probes and clustering scores")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--mode", choices=["threshold", "policy", "oracle", "fixed_rate"])
    p.add_argument("--tol", type=int, default=2, help="boundary tolerance in frames")
    p.add_argument("--probe-split", default="train")
    p.add_argument("--probe-limit", type=int, default=500, help="examples used to fit the probes")
    p.add_argument("--probe-epochs", type=int, default=10)
    p.add_argument("--limit", type=int, help="evaluate only the first N examples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="dump boundaries and unit transcripts")
    common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["threshold", "policy", "oracle", "fixed_rate"])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
