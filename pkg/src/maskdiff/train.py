"""Training paths: base-model pretraining, the full-finetune baseline, and
mask-generator training over a frozen base."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .checkpoint import (
    Checkpoint,
    DENOISER_PREFIX,
    GENERATOR_PREFIX,
    save_checkpoint,
)
from .config import ExperimentConfig
from .data import sample_points
from .denoiser import DenoiserModel
from .diffusion import diffusion_loss, make_schedule
from .errors import ConfigError, NumericError
from .maskgen import MaskGenerator, build_generator_configs
from .optim import AdamW
from .seeding import (
    TAG_DATA_TRAIN,
    TAG_GEN_INIT,
    TAG_MODEL_INIT,
    TAG_TRAIN_LOOP,
    child_rng,
)
from .tensor import Tensor


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]


def make_training_data(cfg: ExperimentConfig):
    mixture = cfg.mixture()
    rng = child_rng(cfg.data.seed, TAG_DATA_TRAIN)
    return sample_points(mixture, cfg.data.n_train, rng)


def losses_csv(epoch_losses: Sequence[float]) -> str:
    lines = ["epoch,loss"]
    for i, loss in enumerate(epoch_losses):
        lines.append(f"{i},{repr(float(loss))}")
    return "\n".join(lines) + "\n"


def _digest(epoch_losses: Sequence[float]) -> str:
    return hashlib.sha256(losses_csv(epoch_losses).encode()).hexdigest()


def _run_epochs(train_cfg, n: int, params, compute_loss, rng_loop):
    """Shared epoch/batch loop: shuffles per epoch, keeps the last partial
    batch, and aborts on a non-finite loss."""
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    epoch_losses = []
    for epoch in range(train_cfg.epochs):
        perm = rng_loop.permutation(n)
        batch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            try:
                loss = compute_loss(idx)
            except NumericError as e:
                raise NumericError(
                    f"training diverged at epoch {epoch}, "
                    f"batch {start // train_cfg.batch_size}: {e}"
                ) from None
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        epoch_losses.append(float(np.mean(batch_losses)))
    return epoch_losses


def train_base(cfg: ExperimentConfig, dataset=None) -> TrainResult:
    """Train all denoiser weights from scratch with the noise-prediction
    loss and classifier-free condition dropout."""
    points, labels = dataset if dataset is not None else make_training_data(cfg)
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    model = DenoiserModel(cfg.model, child_rng(cfg.train.seed, TAG_MODEL_INIT))
    rng_loop = child_rng(cfg.train.seed, TAG_TRAIN_LOOP)

    def compute_loss(idx):
        return diffusion_loss(model, points[idx], labels[idx], sched, rng_loop,
                              cond_dropout=cfg.train.cond_dropout)

    epoch_losses = _run_epochs(cfg.train, len(points), model.params,
                               compute_loss, rng_loop)
    ckpt = Checkpoint(
        config=replace(cfg, train=replace(cfg.train, mode="base")),
        arrays={DENOISER_PREFIX + k: v for k, v in model.state_arrays().items()},
        seed=cfg.train.seed,
        train_log_digest=_digest(epoch_losses),
    )
    return TrainResult(ckpt, epoch_losses)


def train_full_finetune(cfg: ExperimentConfig, base: Checkpoint,
                        dataset=None) -> TrainResult:
    """Continue training every weight of a pretrained base (the overfitting
    comparison arm)."""
    points, labels = dataset if dataset is not None else make_training_data(cfg)
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    model = base.denoiser()
    rng_loop = child_rng(cfg.train.seed, TAG_TRAIN_LOOP)

    def compute_loss(idx):
        return diffusion_loss(model, points[idx], labels[idx], sched, rng_loop,
                              cond_dropout=cfg.train.cond_dropout)

    epoch_losses = _run_epochs(cfg.train, len(points), model.params,
                               compute_loss, rng_loop)
    ckpt = Checkpoint(
        config=replace(cfg, train=replace(cfg.train, mode="full_finetune")),
        arrays={DENOISER_PREFIX + k: v for k, v in model.state_arrays().items()},
        seed=cfg.train.seed,
        train_log_digest=_digest(epoch_losses),
    )
    return TrainResult(ckpt, epoch_losses)


def train_mask_generator(cfg: ExperimentConfig, base: Checkpoint,
                         dataset=None) -> TrainResult:
    """Train per-layer mask generators over a frozen base model.

    Only generator parameters are optimized; the base weights are asserted
    byte-identical before and after.
    """
    points, labels = dataset if dataset is not None else make_training_data(cfg)
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    model = base.denoiser()
    model.set_trainable(False)
    frozen = {k: v.data.tobytes() for k, v in model.params.items()}

    gen_configs = build_generator_configs(
        cfg.model,
        mlp_hidden=cfg.mask.mlp_hidden,
        tau=cfg.mask.tau,
        delta=cfg.mask.delta,
        init_logit=cfg.mask.init_logit,
        use_temb=cfg.train.use_temb,
        use_sample=cfg.train.use_sample,
    )
    if not gen_configs:
        raise ConfigError("model.maskable_layers: no layers to mask")
    generators = [
        MaskGenerator(gc, child_rng(cfg.train.seed, TAG_GEN_INIT, i))
        for i, gc in enumerate(gen_configs)
    ]
    gen_params = {
        f"{g.config.layer_id}.{name}": p
        for g in generators
        for name, p in g.params.items()
    }
    rng_loop = child_rng(cfg.train.seed, TAG_TRAIN_LOOP)

    def compute_loss(idx):
        return diffusion_loss(model, points[idx], labels[idx], sched, rng_loop,
                              generators=generators,
                              cond_dropout=cfg.train.cond_dropout)

    epoch_losses = _run_epochs(cfg.train, len(points), gen_params,
                               compute_loss, rng_loop)

    for k, v in model.params.items():
        if v.data.tobytes() != frozen[k]:
            raise AssertionError(f"freeze contract violated: {k} changed")

    arrays = {DENOISER_PREFIX + k: v for k, v in model.state_arrays().items()}
    for g in generators:
        for name, arr in g.state_arrays().items():
            arrays[f"{GENERATOR_PREFIX}{g.config.layer_id}.{name}"] = arr
    ckpt = Checkpoint(
        config=replace(cfg, train=replace(cfg.train, mode="mask_generator")),
        arrays=arrays,
        seed=cfg.train.seed,
        train_log_digest=_digest(epoch_losses),
    )
    return TrainResult(ckpt, epoch_losses)
