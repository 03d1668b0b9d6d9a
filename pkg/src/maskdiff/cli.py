"""Command-line entry points: training, sampling, reward-guided
generation, evaluation, and the mask studies. Every subcommand is a pure
function of (config, seed) to output bytes under --out."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import (
    MaskSnapshot,
    heldout_samples,
    mask_study,
    run_report,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides, load_config
from .diffusion import make_schedule, spaced_timesteps
from .errors import MaskDiffError
from .freeopt import final_reward, generate_training_free
from .masks import deterministic_mask
from .sampling import generate_labeled
from .seeding import TAG_MASK_STUDY, child_rng
from .tensor import Tensor
from .textio import write_csv, write_lines
from .train import (
    losses_csv,
    train_base,
    train_full_finetune,
    train_mask_generator,
)

SUBCOMMANDS = (
    "train-base", "train-mask", "finetune", "sample",
    "free-opt", "eval", "mask-study", "export-samples",
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdiff",
        description="Desk-scale diffusion lab with learnable binary weight masks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file (key = value tree)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seeds (train/sampler/freeopt)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override single config keys")
        if name in ("train-mask", "finetune", "sample", "free-opt",
                    "mask-study", "export-samples"):
            p.add_argument("--base", required=True,
                           help="input checkpoint path")
        if name == "eval":
            p.add_argument("--ckpt", action="append", required=True,
                           metavar="[ARM=]PATH", help="checkpoint(s) to evaluate")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, seed=args.seed),
            sampler=dataclasses.replace(cfg.sampler, seed=args.seed),
            freeopt=dataclasses.replace(cfg.freeopt, seed=args.seed),
        ).validate()
    return cfg


def _sample_columns(dim: int) -> list[str]:
    return ["class"] + [f"x{i}" for i in range(dim)]


def _write_samples(path: Path, points: np.ndarray, labels: np.ndarray) -> None:
    rows = [[int(c), *[float(v) for v in p]] for c, p in zip(labels, points)]
    write_csv(path, _sample_columns(points.shape[1]), rows)


def _cmd_train(args, mode: str) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "base":
        result = train_base(cfg)
        name = "base.ckpt"
    else:
        base = load_checkpoint(args.base)
        if mode == "mask_generator":
            result = train_mask_generator(cfg, base)
            name = "mask.ckpt"
        else:
            result = train_full_finetune(cfg, base)
            name = "finetune.ckpt"
    save_checkpoint(result.checkpoint, out / name)
    (out / "train_losses.csv").write_text(losses_csv(result.epoch_losses),
                                          newline="")
    print(f"wrote {out / name}")
    return 0


def _cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.base)
    model = ckpt.denoiser()
    generators = ckpt.generators() or None
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    points, labels = generate_labeled(
        model, generators, sched, list(range(cfg.model.num_classes)),
        cfg.eval.per_class, cfg.sampler.num_inference_steps, cfg.sampler.eta,
        cfg.sampler.guidance_scale, cfg.sampler.seed,
    )
    _write_samples(out / "samples.csv", points, labels)
    print(f"wrote {out / 'samples.csv'}")
    return 0


def _cmd_free_opt(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.base)
    model = ckpt.denoiser()
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    specs = cfg.resolved_rewards()

    points, labels, loss_rows, mask_lines = [], [], [], []
    for c in range(cfg.model.num_classes):
        x0, logs, state = generate_training_free(c, cfg, model, sched)
        points.append(x0[0])
        labels.append(c)
        for rec in logs:
            loss_rows.append([c, rec.timestep, rec.iteration, rec.loss])
        loss_rows.append([c, -1, -1, -final_reward(x0, c, specs)])
        for layer, logits in state.logits.items():
            m = deterministic_mask(
                Tensor(logits.data.reshape(1, *logits.shape)),
                state.tau, state.delta,
            )
            bits = m.values.data.reshape(-1)
            snap = MaskSnapshot(-1, f"c{c}.{layer}", bits,
                                float(np.count_nonzero(bits == 0.0) / bits.size))
            mask_lines.append(snap.to_json_line())

    _write_samples(out / "samples.csv", np.array(points), np.array(labels))
    write_csv(out / "freeopt_losses.csv",
              ["class", "timestep", "iteration", "loss"], loss_rows)
    write_lines(out / "freeopt_masks.jsonl", mask_lines)
    print(f"wrote {out / 'samples.csv'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arms: list[tuple[str, Checkpoint]] = []
    for spec in args.ckpt:
        if "=" in spec:
            arm, _, path = spec.partition("=")
        else:
            arm, path = Path(spec).stem, spec
        arms.append((arm, load_checkpoint(path)))
    rows = run_report(cfg, arms)
    write_csv(out / "report.csv", ["arm", "seed", "fgd", "alignment"],
              [[r["arm"], r["seed"], r["fgd"], r["alignment"]] for r in rows])
    print(f"wrote {out / 'report.csv'}")
    return 0


def _cmd_mask_study(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.base)
    model = ckpt.denoiser()
    generators = ckpt.generators()
    if not generators:
        raise MaskDiffError(
            f"checkpoint {args.base} holds no mask generators; run train-mask first"
        )
    timesteps = spaced_timesteps(cfg.schedule.timesteps,
                                 cfg.sampler.num_inference_steps)
    probe = child_rng(cfg.sampler.seed, TAG_MASK_STUDY, 1).standard_normal(
        (1, cfg.model.data_dim))
    snaps, summary = mask_study(model, generators, timesteps, probe,
                                rng=child_rng(cfg.sampler.seed, TAG_MASK_STUDY))
    write_lines(out / "mask_study.jsonl", [s.to_json_line() for s in snaps])
    rows = []
    for layer in sorted(summary.ratios):
        for t, ratio in zip(summary.timesteps, summary.ratios[layer]):
            rows.append([layer, t, ratio, summary.ratio_std[layer],
                         float(summary.hamming[layer].max())])
    write_csv(out / "mask_study_summary.csv",
              ["layer", "timestep", "ratio", "layer_ratio_std",
               "layer_max_hamming"], rows)
    print(f"wrote {out / 'mask_study_summary.csv'}")
    return 0


def _cmd_export_samples(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.base)
    model = ckpt.denoiser()
    generators = ckpt.generators() or None
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    held = heldout_samples(cfg)
    points, labels = generate_labeled(
        model, generators, sched, list(range(cfg.model.num_classes)),
        cfg.eval.per_class, cfg.sampler.num_inference_steps, cfg.sampler.eta,
        cfg.sampler.guidance_scale, cfg.sampler.seed,
    )
    columns = ["source"] + _sample_columns(points.shape[1])
    rows = [["data", int(c), *[float(v) for v in p]]
            for c, p in zip(held.labels, held.points)]
    rows += [["model", int(c), *[float(v) for v in p]]
             for c, p in zip(labels, points)]
    write_csv(out / "samples.csv", columns, rows)
    print(f"wrote {out / 'samples.csv'}")
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "train-base":
            return _cmd_train(args, "base")
        if args.command == "train-mask":
            return _cmd_train(args, "mask_generator")
        if args.command == "finetune":
            return _cmd_train(args, "full_finetune")
        if args.command == "sample":
            return _cmd_sample(args)
        if args.command == "free-opt":
            return _cmd_free_opt(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "mask-study":
            return _cmd_mask_study(args)
        if args.command == "export-samples":
            return _cmd_export_samples(args)
        parser.error(f"unknown subcommand {args.command!r}")
    except MaskDiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
