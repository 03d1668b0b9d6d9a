"""The DDIM generation loop shared by sampling, evaluation, and the
training-free path. One class is generated per seeded stream so batched
runs and single-sample runs consume identical randomness."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .denoiser import DenoiserModel
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, spaced_timesteps
from .maskgen import MaskGenerator, generate_masks
from .seeding import TAG_SAMPLE, TAG_SAMPLE_MASK, child_rng
from .tensor import Tensor


def guided_eps(
    model: DenoiserModel,
    z: Tensor,
    t: int,
    cond: np.ndarray,
    guidance: float,
    masks=None,
) -> Tensor:
    """Classifier-free guided noise estimate; masks apply to both branches."""
    uncond = np.full(len(cond), model.config.null_class, dtype=np.int64)
    eps_u = model.forward(z, t, uncond, masks=masks)
    eps_c = model.forward(z, t, cond, masks=masks)
    return cfg_combine(eps_u, eps_c, guidance)


def generate_class_batch(
    model: DenoiserModel,
    generators: Optional[Sequence[MaskGenerator]],
    sched: NoiseSchedule,
    class_id: int,
    n: int,
    steps: int,
    eta: float,
    guidance: float,
    seed: int,
    stop_before: Optional[int] = None,
) -> np.ndarray:
    """Generate n samples of one class; deterministic in (args, seed).

    stop_before truncates the reverse chain after that many transitions,
    returning the intermediate latents (used to probe a single step).
    """
    rng = child_rng(seed, TAG_SAMPLE, class_id)
    z = Tensor(rng.standard_normal((n, model.config.data_dim)))
    cond = np.full(n, class_id, dtype=np.int64)
    seq = spaced_timesteps(sched.timesteps, steps)
    for i, t in enumerate(seq):
        if stop_before is not None and i >= stop_before:
            break
        t_prev = seq[i + 1] if i + 1 < len(seq) else -1
        masks = None
        if generators:
            mask_rng = child_rng(seed, TAG_SAMPLE_MASK, class_id, i)
            masks = generate_masks(generators, t, z, hard=True, rng=mask_rng)
        eps = guided_eps(model, z, t, cond, guidance, masks)
        z = ddim_step(z, eps, t, t_prev, sched, eta, rng).detach()
    return z.data


def generate_labeled(
    model: DenoiserModel,
    generators: Optional[Sequence[MaskGenerator]],
    sched: NoiseSchedule,
    classes: Sequence[int],
    per_class: int,
    steps: int,
    eta: float,
    guidance: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class batches concatenated: returns (points, labels)."""
    points, labels = [], []
    for c in classes:
        pts = generate_class_batch(
            model, generators, sched, int(c), per_class, steps, eta, guidance, seed
        )
        points.append(pts)
        labels.append(np.full(per_class, int(c), dtype=np.int64))
    return np.concatenate(points), np.concatenate(labels)
