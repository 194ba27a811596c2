"""Command-line pipeline: gen-data -> train-gan -> augment / train-clf -> evaluate -> report.

Exit codes: 0 success, 1 validation error (bad arguments or config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, parse_config, parse_config_dict
from .data import (
    NORMAL,
    DatasetManifest,
    LesionParams,
    ManifestRow,
    SampleRecord,
    TUMOR,
    apply_manifest,
    generate_phantom,
    load_dataset,
    read_manifest,
    save_dataset,
    scarce_subset,
    select,
    split_dataset,
)
from .evaluation import (
    ARMS,
    ExperimentError,
    build_arm_set,
    evaluate_classifier,
    run_experiment,
    train_classifier,
)
from .training import load_checkpoint, synthesize_augmented, train

SUBCOMMANDS = ("gen-data", "train-gan", "augment", "train-clf", "evaluate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="saggan", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", help="one of: " + ", ".join(SUBCOMMANDS))
    ap.add_argument("--config", help="JSON run config (defaults used when omitted)")
    ap.add_argument("--seed", type=int, help="overrides every seed in the config")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--data", help="dataset directory (default: --out)")
    ap.add_argument("--checkpoint", help="GAN checkpoint directory")
    ap.add_argument("--resume", help="checkpoint to resume GAN training from")
    ap.add_argument("--allow-config-mismatch", action="store_true",
                    help="accept a checkpoint written under a different config hash")
    ap.add_argument("--arm", default="no_da", help="train-clf arm: " + ", ".join(ARMS))
    ap.add_argument("--report", help="directory holding report.json (default: --out)")
    return ap


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config_dict({})
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _dataset(args) -> List[SampleRecord]:
    root = Path(args.data or args.out)
    read_manifest(root)  # names the missing manifest before anything else
    return load_dataset(root)


def _gan_records(cfg: RunConfig, records):
    train_recs = select(records, "train")
    if cfg.gan.train_on_scarce:
        return scarce_subset(train_recs, cfg.experiment.tumor_keep, cfg.experiment.seed)
    return train_recs


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> List[str]:
    d = cfg.data
    lesion = LesionParams(d.radius_min, d.radius_max, d.intensity_min, d.intensity_max)
    records = generate_phantom(d.seed, d.n_samples, d.image_size, d.tumor_fraction, lesion)
    manifest = split_dataset(records, d.split_ratios, d.seed)
    save_dataset(records, manifest, out)
    return ["manifest.csv", "images/", "masks/"]


def cmd_train_gan(cfg: RunConfig, args, out: Path) -> List[str]:
    records = _gan_records(cfg, _dataset(args))
    gan = dataclasses.replace(cfg.gan, output_dir=str(out))
    train(records, gan, output_dir=out, resume_from=args.resume,
          allow_config_mismatch=args.allow_config_mismatch)
    return ["history.csv", "checkpoint/", "checkpoints/"]


def _checkpoint(cfg: RunConfig, args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint, cfg.gan, args.allow_config_mismatch)


def cmd_augment(cfg: RunConfig, args, out: Path) -> List[str]:
    state = _checkpoint(cfg, args)
    normals = [r for r in _gan_records(cfg, _dataset(args)) if r.domain == NORMAL]
    pairs = synthesize_augmented([r.image for r in normals], state, cfg.experiment.threshold)
    records, rows = [], []
    for r, (img, mask) in zip(normals, pairs):
        rid = f"syn_{r.id}"
        records.append(SampleRecord(rid, img, TUMOR, mask, 1, "train"))
        rows.append(ManifestRow(rid, f"images/{rid}.png", f"masks/{rid}.png", TUMOR, 1, "train"))
    save_dataset(records, DatasetManifest(rows), out)
    return ["manifest.csv", "images/", "masks/"]


def cmd_train_clf(cfg: RunConfig, args, out: Path) -> List[str]:
    if args.arm not in ARMS:
        raise UsageError(f"--arm must be one of {', '.join(ARMS)}")
    records = _dataset(args)
    scarce = scarce_subset(select(records, "train"), cfg.experiment.tumor_keep, cfg.experiment.seed)
    synthetic = None
    if args.arm == "sag_gan":
        state = _checkpoint(cfg, args)
        normals = [r for r in scarce if r.domain == NORMAL]
        pairs = synthesize_augmented([r.image for r in normals], state, cfg.experiment.threshold)
        synthetic = [SampleRecord(f"syn{i:05d}", im, TUMOR, m, 1, "train")
                     for i, (im, m) in enumerate(pairs)]
    arm_set = build_arm_set(args.arm, scarce, cfg.classifier.seed, synthetic)
    model, info = train_classifier(arm_set, select(records, "val"), cfg.classifier)
    result = evaluate_classifier(model, select(records, "test"), args.arm, cfg.classifier.seed)
    torch.save(model.state_dict(), out / "classifier.pt")
    metrics = {
        "arm": args.arm,
        "best_epoch": info["best_epoch"],
        "best_val_accuracy": info["best_val_accuracy"],
        "test": {**dataclasses.asdict(result), "confusion": dataclasses.asdict(result.confusion)},
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    return ["classifier.pt", "metrics.json"]


def cmd_evaluate(cfg: RunConfig, args, out: Path) -> List[str]:
    records = _dataset(args)
    state = None
    if "sag_gan" in cfg.experiment.arms and args.checkpoint:
        state = _checkpoint(cfg, args)
    run_experiment(records, cfg.experiment, cfg.classifier, gan_checkpoint=state,
                   gan_config=cfg.gan, out_dir=out, config_echo=cfg.to_dict(),
                   config_hash=cfg.hash)
    return ["report.json", "report.csv"] + (["gan/"] if state is None and "sag_gan" in cfg.experiment.arms else [])


def format_report(doc: dict) -> str:
    lines = ["| arm | accuracy | AUC | TPR | TNR | seeds |", "|---|---|---|---|---|---|"]
    for arm in ARMS:
        if arm not in doc:
            continue
        r = doc[arm]
        lines.append(f"| {arm} | {r['accuracy']:.4f} | {r['auc']:.4f} | {r['tpr']:.4f} "
                     f"| {r['tnr']:.4f} | {len(r['seeds'])} |")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, args, out: Path) -> List[str]:
    src = Path(args.report or args.out) / "report.json"
    if not src.is_file():
        raise FileNotFoundError(f"report not found: {src}")
    table = format_report(json.loads(src.read_text(encoding="utf-8")))
    print(table, end="")
    (out / "report.md").write_text(table, encoding="utf-8")
    return ["report.md"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-gan": cmd_train_gan,
    "augment": cmd_augment,
    "train-clf": cmd_train_clf,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def write_run_json(out: Path, cfg: RunConfig, args, started_at: str, artifacts: List[str]) -> None:
    doc = {
        "config_hash": cfg.hash,
        "seed": cfg.gan.seed if args.seed is None else args.seed,
        "subcommand": args.subcommand,
        "started_at": started_at,
        "artifact_paths": artifacts,
        "config": cfg.to_dict(),
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "versions": {
            "saggan": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        if args.subcommand not in COMMANDS:
            raise UsageError(f"{parser.format_usage()}unknown subcommand {args.subcommand!r}; "
                             f"choose from {', '.join(SUBCOMMANDS)}")
        cfg = _load_config(args)
    except (UsageError, ConfigError) as err:
        print(str(err), file=sys.stderr)
        return 1

    started_at = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.subcommand](cfg, args, out)
        write_run_json(out, cfg, args, started_at, artifacts)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failures map to exit code 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
