"""Command-line surface: pretrain, mask-report, degrade, probe, gradcheck.

Exit codes: 0 success, 1 configuration/checkpoint error, 2 numerical failure.
Config-stage failures never leave partial output files; reports are written to
a temp file and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import evalharness, trainer
from .config import RunConfig, load_run_config, save_snapshot
from .corpus import generate_synthetic, load_manifest
from .errors import CheckpointError, ConfigurationError, HardmaskError, NumericalError
from .masking import build_adaptive_mask
from .network import clone_as_teacher, encode, init_model, predict_frame_losses
from .trainer import effective_mask_config, load_train_checkpoint, make_optimizer, pretrain

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "schedule", None) is not None:
        cfg.train.mask.schedule = args.schedule
    if getattr(args, "steps", None) is not None:
        cfg.train.total_steps = args.steps
    if getattr(args, "alpha", None) is not None:
        cfg.train.alpha = args.alpha
    if getattr(args, "mask_prob", None) is not None:
        cfg.train.mask.mask_prob = args.mask_prob
    cfg.validate()
    return cfg


def _load_cfg(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    return _apply_overrides(cfg, args)


def _corpus(cfg: RunConfig, manifest: str | None):
    if manifest is not None:
        return load_manifest(manifest)
    return generate_synthetic(cfg.synth, cfg.model.frontend)


def _load_states(cfg: RunConfig, checkpoint: str | Path):
    student = init_model(cfg.model, "student")
    teacher = clone_as_teacher(student)
    optimizer = make_optimizer(student, cfg.train)
    load_train_checkpoint(checkpoint, student, teacher, optimizer)
    return student, teacher


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    tmp.replace(path)


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    utterances = _corpus(cfg, args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_snapshot(cfg, out_dir / "config.snapshot")
    pretrain(utterances, cfg.model, cfg.train, out_dir=out_dir, resume=args.resume)
    return EXIT_OK


def cmd_mask_report(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    student, teacher = _load_states(cfg, args.checkpoint)
    utterances = _corpus(cfg, args.manifest)
    from .corpus import make_batch

    batch = make_batch(utterances[: cfg.train.batch_size], cfg.model.frontend)
    with torch.no_grad():
        enc = encode(teacher, batch)
        predicted = predict_frame_losses(teacher, enc, batch.valid).numpy()
    mask_cfg = effective_mask_config(cfg.train)
    rows = []
    for epoch in range(cfg.train.epochs):
        rng = np.random.default_rng([cfg.train.seed, epoch])
        mask = build_adaptive_mask(batch.valid, predicted, mask_cfg, epoch, rng)
        for i, st in enumerate(mask.stats):
            rows.append(
                [epoch, i, st.num_mask, st.selective_count, st.random_count,
                 st.final_cardinality, int(st.clamp_flag)]
            )
    _write_csv(
        Path(args.out),
        ["epoch", "row", "num_mask", "selective_count", "random_count",
         "final_cardinality", "clamp_flag"],
        rows,
    )
    return EXIT_OK


def cmd_degrade(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    student, teacher = _load_states(cfg, args.checkpoint)
    utterances = _corpus(cfg, args.manifest)
    curve = evalharness.degrade_experiment(
        student,
        teacher,
        utterances,
        cfg.model.frontend,
        percentages=cfg.harness.degrade_percentages,
        seed=cfg.train.seed,
        layer=cfg.harness.probe_layer,
        use_actual=cfg.harness.degrade_use_actual,
    )
    rows = []
    for strategy in ("random", "selective"):
        for p, value in zip(curve.masking_percentages, curve.relative[strategy]):
            rows.append([strategy, p, value])
    _write_csv(Path(args.out), ["strategy", "percentage", "relative_error"], rows)
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    student, _ = _load_states(cfg, args.checkpoint)
    utterances = _corpus(cfg, args.manifest)
    layer = args.layer if args.layer is not None else cfg.harness.probe_layer
    result = evalharness.probe_train(
        student,
        utterances,
        cfg.model.frontend,
        layer=layer,
        train_fraction=cfg.harness.probe_train_fraction,
        seed=cfg.train.seed,
    )
    payload = {
        "layer": result.layer,
        "accuracy": result.accuracy,
        "train_utterances": len(result.train_utts),
        "heldout_utterances": len(result.heldout_utts),
    }
    path = Path(args.out)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n")
    tmp.replace(path)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.config is not None:
        cfg = _load_cfg(args)
        model_cfg = dataclasses.replace(
            cfg.model, frontend=dataclasses.replace(cfg.model.frontend, passthrough=True)
        )
    else:
        model_cfg = trainer.tiny_gradcheck_profile()
    error = trainer.joint_gradcheck(
        model_cfg, seed=args.seed or 0, eps=args.eps, num_coords=args.coords
    )
    print(f"gradcheck max relative error: {error:.3e} (threshold {args.threshold:.1e})")
    return EXIT_OK if error < args.threshold else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hardmask",
        description="Self-distilled masked acoustic modeling with easy-to-hard masking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, out=True):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--schedule", choices=("e2h", "hard", "random"), default=None)
        p.add_argument("--steps", type=int, default=None, dest="steps")
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--mask-prob", type=float, default=None, dest="mask_prob")
        p.add_argument("--manifest", default=None, help="corpus manifest instead of synthesis")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    common(p)
    p.add_argument("--resume", default=None, help="resume from a training checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("mask-report", help="per-epoch mask statistics CSV")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_mask_report)

    p = sub.add_parser("degrade", help="selective vs random masking degradation CSV")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("probe", help="frozen-representation linear probe JSON")
    common(p, checkpoint=True)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=60)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HardmaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
