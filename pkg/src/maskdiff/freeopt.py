"""Training-free per-timestep mask optimization.

No generator is involved: raw per-layer mask logits are optimized against
analytic reward models at every sampler step, warm-starting each timestep
from the previous one. Base weights are never touched; only the logits
move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, FreeOptConfig, RewardSpec
from .data import MixtureSpec
from .denoiser import DenoiserModel
from .diffusion import NoiseSchedule, ddim_step, predict_x0, spaced_timesteps
from .errors import ConfigError, NumericError
from .masks import deterministic_mask, gumbel_sigmoid
from .optim import AdamW
from .sampling import guided_eps
from .seeding import TAG_FREEOPT_MASK, TAG_SAMPLE, child_rng
from .tensor import Tensor


@dataclass
class MaskState:
    """Per-layer mask logits shared across one generation, plus the gate
    parameters."""

    logits: dict[str, Tensor]
    tau: float
    delta: float

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.logits.items()}


@dataclass
class IterationRecord:
    timestep: int
    iteration: int
    loss: float


def init_mask_state(model: DenoiserModel, cfg: FreeOptConfig) -> MaskState:
    """Logits start strongly positive so the initial hard masks are all
    ones (the committed, noise-free gate is exactly all ones)."""
    logits = {
        layer: Tensor(
            np.full(model.config.layer_shape(layer), cfg.init_logit),
            requires_grad=True,
        )
        for layer in model.config.maskable_layers
    }
    if not logits:
        raise ConfigError("checkpoint model has no maskable layers")
    return MaskState(logits=logits, tau=cfg.tau, delta=cfg.delta)


def evaluate_reward(x: Tensor, c: int, spec: RewardSpec) -> Tensor:
    """Differentiable reward of a decoded sample; higher is better."""
    mixture = spec.params
    if mixture is None:
        raise ValueError(f"reward {spec.kind} has no mixture parameters attached")
    if not 0 <= c < mixture.num_components:
        raise ValueError(
            f"class id {c} outside [0, {mixture.num_components})"
        )
    if spec.kind == "mode_proximity":
        return _mode_proximity(x, mixture.means[c])
    if spec.kind == "mixture_loglik":
        return _mixture_loglik(x, mixture)
    raise ConfigError(f"unknown reward kind {spec.kind!r}")


def _mode_proximity(x: Tensor, mean: np.ndarray) -> Tensor:
    diff = T.sub(x, Tensor(np.broadcast_to(mean, x.shape).copy()))
    sq = T.tsum(T.mul(diff, diff))
    return T.scale(sq, -1.0 / x.shape[0])


def _mixture_loglik(x: Tensor, mixture: MixtureSpec) -> Tensor:
    """Mean log-density of the rows of x under the ground-truth mixture.

    Log-sum-exp over components with a detached max: the shift cancels in
    the value and does not perturb the gradient.
    """
    d = mixture.dim
    var = mixture.component_std**2
    log_norm = -0.5 * d * math.log(2.0 * math.pi * var)
    total = None
    for i in range(x.shape[0]):
        exponents = []
        for k in range(mixture.num_components):
            mu = np.broadcast_to(mixture.means[k], (1, d)).copy()
            diff = T.sub(_row(x, i, d), Tensor(mu))
            sq = T.tsum(T.mul(diff, diff))
            a_k = T.add(
                T.scale(sq, -1.0 / (2.0 * var)),
                math.log(mixture.weights[k]) + log_norm,
            )
            exponents.append(a_k)
        m = max(a.item() for a in exponents)
        acc = None
        for a in exponents:
            e = T.exp(T.sub(a, m))
            acc = e if acc is None else T.add(acc, e)
        row_ll = T.add(T.log(acc), m)
        total = row_ll if total is None else T.add(total, row_ll)
    return T.scale(total, 1.0 / x.shape[0])


def _row(x: Tensor, i: int, d: int) -> Tensor:
    # Slice one row out of a (B, d) tensor via a selector product, keeping
    # the graph intact.
    sel = np.zeros((1, x.shape[0]))
    sel[0, i] = 1.0
    return T.matmul(Tensor(sel), x)


def reward_loss(x: Tensor, c: int, specs: Sequence[RewardSpec]) -> Tensor:
    """Negated weighted reward sum; zero-weight terms contribute nothing."""
    if not specs:
        raise ValueError("at least one reward spec is required")
    active = [s for s in specs if s.weight != 0.0]
    if not active:
        return Tensor(0.0)
    total = None
    for s in active:
        term = T.scale(evaluate_reward(x, c, s), -s.weight)
        total = term if total is None else T.add(total, term)
    return total


def decode_latent(z0: Tensor) -> Tensor:
    """Latent-to-sample decoding is the identity at desk scale."""
    return z0


def _hard_masks(state: MaskState, rng: np.random.Generator) -> dict:
    masks = {}
    for layer, logits in state.logits.items():
        l3 = T.reshape(logits, (1, *logits.shape))
        masks[layer] = gumbel_sigmoid(l3, state.tau, state.delta, hard=True, rng=rng)
    return masks


def _committed_masks(state: MaskState) -> Optional[dict]:
    """Noise-free thresholded masks; None when every entry is 1 (the
    masked path then reduces exactly to the plain model)."""
    masks = {}
    all_ones = True
    for layer, logits in state.logits.items():
        l3 = T.reshape(logits.detach(), (1, *logits.shape))
        m = deterministic_mask(l3, state.tau, state.delta)
        all_ones = all_ones and bool(np.all(m.values.data == 1.0))
        masks[layer] = m
    return None if all_ones else masks


def optimize_timestep(
    z_t: Tensor,
    t: int,
    t_prev: int,
    c: int,
    state: MaskState,
    cfg: FreeOptConfig,
    model: DenoiserModel,
    sched: NoiseSchedule,
    specs: Sequence[RewardSpec],
    opt: AdamW,
) -> tuple[Tensor, list[IterationRecord]]:
    """Run the inner reward-optimization loop at one timestep, then commit
    the transition with the final logits."""
    cond = np.array([c], dtype=np.int64)
    records: list[IterationRecord] = []
    for k in range(cfg.iterations):
        rng = child_rng(cfg.seed, TAG_FREEOPT_MASK, c, t, k)
        try:
            masks = _hard_masks(state, rng)
            eps = guided_eps(model, z_t, t, cond, cfg.guidance, masks)
            z_prev = ddim_step(z_t, eps, t, t_prev, sched, eta=0.0)
            z0 = z_prev if cfg.direct_z0 else predict_x0(z_prev, eps, t_prev, sched)
            loss = reward_loss(decode_latent(z0), c, specs)
        except NumericError as e:
            raise NumericError(
                f"training-free optimization failed at t={t}, iteration {k}: {e}"
            ) from None
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append(IterationRecord(timestep=t, iteration=k, loss=loss.item()))

    masks = _committed_masks(state)
    eps = guided_eps(model, z_t, t, cond, cfg.guidance, masks)
    z_prev = ddim_step(z_t, eps, t, t_prev, sched, eta=0.0)
    return z_prev.detach(), records


def generate_training_free(
    c: int,
    cfg: ExperimentConfig,
    model: DenoiserModel,
    sched: NoiseSchedule,
    specs: Optional[Sequence[RewardSpec]] = None,
) -> tuple[np.ndarray, list[IterationRecord], MaskState]:
    """Full reward-guided generation for one condition.

    The latent stream matches plain sampling for the same seed, so with
    zero iterations (or all-zero reward weights) the output is bit-equal
    to the unmasked baseline.
    """
    fo = cfg.freeopt
    specs = list(specs) if specs is not None else list(cfg.resolved_rewards())
    state = init_mask_state(model, fo)

    rng = child_rng(fo.seed, TAG_SAMPLE, c)
    z = Tensor(rng.standard_normal((1, model.config.data_dim)))
    seq = spaced_timesteps(sched.timesteps, fo.steps)
    logs: list[IterationRecord] = []
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else -1
        if fo.reset_per_timestep:
            state = init_mask_state(model, fo)
        # Fresh optimizer moments per timestep: reward magnitudes vary by
        # orders of magnitude along the trajectory, and moments carried
        # from early steps would freeze the late (informative) updates.
        opt = AdamW(state.logits, lr=fo.lr, weight_decay=0.0)
        z, records = optimize_timestep(
            z, t, t_prev, c, state, fo, model, sched, specs, opt
        )
        logs.extend(records)
    return z.data, logs, state


def final_reward(x0: np.ndarray, c: int, specs: Sequence[RewardSpec]) -> float:
    """Weighted reward of a finished sample (the optimization objective,
    un-negated)."""
    x = Tensor(np.atleast_2d(x0))
    total = 0.0
    for s in specs:
        if s.weight != 0.0:
            total += s.weight * evaluate_reward(x, c, s).item()
    return total
