"""Command-line driver for the whole pipeline.

    sdnet generate  --config run.cfg --out data/
    sdnet pretrain  --config run.cfg --out runs/pre/
    sdnet finetune  --config run.cfg --init runs/pre/pretrain.sdck \
                    --mode ecb --out runs/ft/
    sdnet evaluate  --config run.cfg --checkpoint runs/ft/finetune_ecb.sdck \
                    --out runs/ft/
    sdnet segment   --config run.cfg --checkpoint runs/ft/finetune_ecb.sdck \
                    --volume man_020 --out runs/seg/
    sdnet gradcheck

Every output file is written atomically (temp file + rename) and contains
no timestamps, so reruns with identical config and seed are byte-identical.
Commands exit 0 on success; on failure they print one ``error: ...`` line
to stderr and exit 1. Dataset directories are only ever read.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import load_run_config
from .data import generate_dataset, load_dataset, write_dataset
from .gradcheck import run_gradcheck
from .metrics import evaluate_model, write_report_csv
from .model import predict_labels
from .serialize import write_sdt1
from .train import (CheckpointError, FineTuneMode, finetune, load_checkpoint,
                    pretrain, save_checkpoint)


def _add_common(sub, out_required=True):
    sub.add_argument("--config", metavar="PATH", help="key=value run configuration file")
    sub.add_argument("--seed", type=int, metavar="U64", help="override the root seed")
    if out_required is not None:
        sub.add_argument("--out", metavar="DIR", required=out_required,
                         help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdnet",
        description="Train and evaluate the encoder-decoder segmenter on "
                    "synthetic two-tier (weak/manual) labeled volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset directory")
    _add_common(p, out_required=False)
    p.add_argument("--force", action="store_true",
                   help="write into a nonempty output directory")

    p = sub.add_parser("pretrain", help="train from scratch on the aux (weak) tier")
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint on manual labels")
    _add_common(p)
    p.add_argument("--init", metavar="PATH", required=True,
                   help="pretrained checkpoint to start from")
    p.add_argument("--mode", choices=[m.value for m in FineTuneMode], required=True,
                   help="normal keeps standard weights; ecb re-weights from validation Dice")

    p = sub.add_parser("evaluate", help="per-class Dice report on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)

    p = sub.add_parser("segment", help="segment one volume and write the label volume")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--volume", metavar="ID", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _add_common(p, out_required=None)

    return parser


def _config(args) -> "RunConfig":
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_run_config(args.config, overrides)


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.data_dir
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise FileExistsError(f"output directory {out!r} is not empty (use --force)")
    dataset = generate_dataset(cfg.data, cfg.seed, cfg.corruption)
    write_dataset(dataset, out)
    n_vols = len(dataset.volumes)
    print(f"generate: wrote {n_vols} volumes ({cfg.data.n_classes} classes, "
          f"extents {'x'.join(map(str, cfg.data.extents))}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(cfg.data_dir)
    model_config = cfg.model_config(dataset.n_classes)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "pretrain.sdck")
    log = os.path.join(args.out, "pretrain_log.csv")
    params, logs = pretrain(cfg.train, model_config, dataset,
                            aug_config=cfg.augmentation(),
                            log_path=log, checkpoint_path=ckpt)
    save_checkpoint(params, ckpt)
    best = max(entry.mean_dice for entry in logs)
    print(f"pretrain: {len(logs)} epochs, best val dice {best:.4f}, checkpoint {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    mode = FineTuneMode(args.mode)
    pretrained = load_checkpoint(args.init)
    dataset = load_dataset(cfg.data_dir)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"finetune_{mode.value}.sdck")
    log = os.path.join(args.out, f"finetune_{mode.value}_log.csv")
    params, logs = finetune(cfg.train, pretrained, dataset, mode,
                            aug_config=cfg.augmentation(),
                            log_path=log, checkpoint_path=ckpt)
    save_checkpoint(params, ckpt)
    best = max(entry.mean_dice for entry in logs)
    print(f"finetune[{mode.value}]: {len(logs)} epochs, best val dice {best:.4f}, "
          f"checkpoint {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg.data_dir)
    if params.config.num_classes != dataset.n_classes:
        raise CheckpointError(
            f"checkpoint has {params.config.num_classes} classes, "
            f"dataset has {dataset.n_classes}")
    report = evaluate_model(params, dataset.split("test"))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "evaluation.csv")
    write_report_csv(report, path)
    print(f"evaluate: mean dice {report.overall_mean():.4f} over "
          f"{len(report.volume_ids)} test volumes, report {path}")
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint)
    dataset = load_dataset(cfg.data_dir)
    if params.config.num_classes != dataset.n_classes:
        raise CheckpointError(
            f"checkpoint has {params.config.num_classes} classes, "
            f"dataset has {dataset.n_classes}")
    if args.volume not in dataset.volumes:
        raise KeyError(f"unknown volume {args.volume!r}")
    vol = dataset.volumes[args.volume]
    pred = predict_labels(params, vol.image[:, None])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.volume}_labels.sdt")
    write_sdt1(path, pred.astype(np.float32))
    print(f"segment: {args.volume} -> {path} (extents {'x'.join(map(str, pred.shape))})")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(seeds=(seed, seed + 1, seed + 2))
    for check in results:
        print(check.format_line())
    failed = [check.name for check in results if not check.passed]
    if failed:
        print(f"gradcheck: FAILED ({', '.join(failed)})")
        return 1
    print(f"gradcheck: all {len(results)} checks passed")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "segment": cmd_segment,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as err:  # one-line, machine-parsable failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
