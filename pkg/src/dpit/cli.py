"""``dpit`` command line: gen-data, train, predict, eval, grad-check.

Exit codes: 0 ok, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backbones import ConfigError
from .checkpoint import CheckpointError
from .config import RunConfig, load_file, parse_value, resolve
from .data.coco import CocoParseError, parse_coco, parse_predictions
from .data.skeleton import SkeletonError, load_skeleton
from .data.store import load_dataset, save_dataset
from .data.synth import generate_dataset
from .gradcheck import GradCheckError, grad_check
from .metrics import coco_report, pckh_report
from .model import DPIT
from .train import BatchSource, TrainData, TrainingDiverged, model_from_checkpoint, predict_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("dpit")


class UsageError(Exception):
    pass


# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed",
    "preset": "model.preset",
    "skeleton": "skeleton",
    "data": "data_dir",
    "out_dir": "out_dir",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "max_steps": "train.max_steps",
    "augment": "train.augment",
    "count": "data.count",
}


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="TOML run config (see configs/tiny.toml)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set model.depth=4 (value parsed as TOML)")
    for n in names:
        if n == "seed":
            p.add_argument("--seed", type=int)
        elif n == "preset":
            p.add_argument("--preset")
        elif n == "skeleton":
            p.add_argument("--skeleton", help="builtin name (coco17, mpii16) or skeleton JSON path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpit", description="Dual-branch pose transformer on synthetic scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic scenes with COCO-style annotations")
    _common(g, "seed", "skeleton")
    g.add_argument("--count", type=int)
    g.add_argument("--out", dest="out", required=True)

    t = sub.add_parser("train", help="train a model; one loss line per step, a checkpoint per epoch")
    _common(t, "seed", "preset", "skeleton")
    t.add_argument("--data")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("predict", help="top-down inference on ground-truth boxes")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="dataset directory (images/ + annotations.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-bu", action="store_true", help="zero the bottom-up tokens")

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--metric", choices=("coco", "pckh"), default="coco")
    e.add_argument("--skeleton", default=None)
    e.add_argument("--out", help="also write the report here")

    c = sub.add_parser("grad-check", help="finite-difference check of the full model loss")
    _common(c, "seed", "preset")
    c.add_argument("--samples", type=int, default=200)
    c.add_argument("--tol", type=float, default=1e-3)
    return ap


def run_config(args) -> RunConfig:
    flags = {}
    for dest, key in _FLAG_KEYS.items():
        if getattr(args, dest, None) is not None:
            flags[key] = getattr(args, dest)
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = parse_value(v.strip())
    return resolve(load_file(getattr(args, "config", None)), flags)


# ---------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = run_config(args)
    skel = load_skeleton(cfg["skeleton"])
    count = int(cfg["data.count"])
    if count < 0:
        raise ConfigError("--count must be non-negative")
    images, ds = generate_dataset(cfg.scene(), skel, count)
    try:
        out = save_dataset(args.out, images, ds, skel)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {args.out}: {e}") from None
    print(f"wrote {count} images, {sum(len(v) for v in ds.instances.values())} persons to {out}")
    return EXIT_OK


def _load_data(root, skel=None):
    root = Path(root)
    if not (root / "annotations.json").is_file():
        raise UsageError(f"no annotations.json under {root}")
    return load_dataset(root, skel)


def cmd_train(args) -> int:
    cfg = run_config(args)
    mcfg, tcfg = cfg.model(), cfg.train()
    skel = load_skeleton(cfg["skeleton"])
    if skel.K != mcfg.num_keypoints:
        raise UsageError(f"skeleton {skel.name} has K={skel.K} but model expects {mcfg.num_keypoints}")
    images, ds, _ = _load_data(cfg["data_dir"], skel)
    data = TrainData.from_coco(images, ds)
    if len(data) == 0 or not any(data.instances):
        raise UsageError(f"dataset {cfg['data_dir']} has no annotated persons")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    model = DPIT(mcfg)
    log_path = out / "loss.log"
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as fh:
        def on_step(step, epoch, lr, loss):
            fh.write(f"{step} {epoch} {lr!r} {loss!r}\n")
        try:
            res = train(model, data, tcfg, skel, out_dir=out, resume=args.resume, on_step=on_step)
        except CheckpointError as e:
            raise UsageError(str(e)) from None
    final = res.checkpoints[-1] if res.checkpoints else Path(args.resume)
    print(f"trained {res.steps} steps over {res.epochs_done} epochs; last checkpoint {final}; log {log_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        model, meta = model_from_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, KeyError, TypeError) as e:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    images, ds, skel = _load_data(args.images)
    if skel.K != model.cfg.num_keypoints:
        raise UsageError(f"checkpoint predicts K={model.cfg.num_keypoints} joints but data skeleton "
                         f"{skel.name} has K={skel.K}")
    preds = predict_dataset(model, TrainData.from_coco(images, ds), mask_bu=args.mask_bu)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(preds, indent=1) + "\n")
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_path = Path(args.gt)
    skel = load_skeleton(args.skeleton) if args.skeleton else (
        load_skeleton(gt_path.parent / "skeleton.json") if (gt_path.parent / "skeleton.json").is_file()
        else load_skeleton("coco17"))
    try:
        ds = parse_coco(gt_path.read_text(), skel)
        preds = parse_predictions(Path(args.pred).read_text())
    except OSError as e:
        raise UsageError(str(e)) from None
    missing = sorted({int(p["image_id"]) for p in preds} - set(ds.images))
    if missing:
        raise UsageError(f"prediction image ids missing from ground truth: {missing[:20]}")
    if args.metric == "coco":
        report = coco_report(ds.instances, preds, skel.oks_k)
    else:
        report = pckh_report(ds.instances, preds, skel.oks_k, joint_names=list(skel.joints))
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def grad_check_model(cfg: RunConfig, samples: int, tol: float = 1e-3):
    """Float64 finite-difference check of the full loss on a 2-image synthetic batch."""
    from dataclasses import replace

    from .data.synth import SceneSpec

    mcfg = cfg.model()
    skel = load_skeleton(cfg["skeleton"])
    model = DPIT(mcfg).astype(np.float64)
    images, ds = generate_dataset(SceneSpec(image_hw=(128, 128), persons=(1, 1), seed=cfg.seed), skel, 2)
    tcfg = replace(cfg.train(), augment=False, batch_size=64)
    batch = next(BatchSource(TrainData.from_coco(images, ds), mcfg, tcfg, skel).batches(0))
    return grad_check(lambda: model.loss(batch), model.params, samples=samples, tol=tol, seed=cfg.seed)


def cmd_grad_check(args) -> int:
    cfg = run_config(args)
    if args.samples < 0:
        raise UsageError("--samples must be non-negative")
    if args.samples == 0:
        print("warning: 0 samples requested; grad-check passes vacuously", file=sys.stderr)
        return EXIT_OK
    report = grad_check_model(cfg, args.samples, args.tol)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CocoParseError, SkeletonError, CheckpointError, FileNotFoundError) as e:
        print(f"dpit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, GradCheckError, FloatingPointError) as e:
        print(f"dpit {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
