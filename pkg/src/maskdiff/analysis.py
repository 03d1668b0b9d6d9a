"""Desk-scale metrics and mask statistics.

The FID analog is the exact Fréchet distance between Gaussians fitted in
raw data space; the CLIP-score analog is the mean ground-truth posterior
probability that a conditioned sample belongs to its target component.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import MixtureSpec, posterior_responsibilities, sample_points
from .denoiser import DenoiserModel, embed_timesteps
from .diffusion import make_schedule
from .errors import NumericError, ShapeError
from .maskgen import MaskGenerator, fuse_inputs, mask_logits
from .masks import MaskTensor, mask_ratio
from .sampling import generate_labeled
from .seeding import TAG_DATA_HELDOUT, TAG_MASK_STUDY, child_rng
from .tensor import Tensor


@dataclass
class SampleSet:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    provenance: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) < 2:
            raise ValueError("a sample set needs at least 2 points of equal dim")


def _sqrt_trace_of_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((cov_a cov_b)^(1/2)) via the symmetrized eigendecomposition form."""
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    if np.any(vals_a < -1e-10):
        raise NumericError(f"covariance has negative eigenvalue {vals_a.min()}")
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ cov_b @ root_a
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigvalsh(inner)
    if np.any(vals < -1e-10):
        raise NumericError(f"matrix square root failed: eigenvalue {vals.min()}")
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_from_moments(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """Closed-form Fréchet distance between two Gaussians."""
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    cov_a = np.asarray(cov_a, float)
    cov_b = np.asarray(cov_b, float)
    jitter = 1e-10
    if min(np.linalg.eigvalsh(cov_a).min(), np.linalg.eigvalsh(cov_b).min()) < jitter:
        eye = np.eye(len(mu_a))
        cov_a = cov_a + jitter * eye
        cov_b = cov_b + jitter * eye
    diff = float(((mu_a - mu_b) ** 2).sum())
    value = diff + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * (
        _sqrt_trace_of_product(cov_a, cov_b)
    )
    return max(value, 0.0)


def frechet_gaussian(a: SampleSet, b: SampleSet) -> float:
    """Fréchet distance between Gaussians fitted to the two sample sets."""
    if a.points.shape[1] != b.points.shape[1]:
        raise ShapeError(
            f"sample sets have different dimensions: "
            f"{a.points.shape[1]} vs {b.points.shape[1]}"
        )
    mu_a, mu_b = a.points.mean(axis=0), b.points.mean(axis=0)
    cov_a = np.cov(a.points, rowvar=False)
    cov_b = np.cov(b.points, rowvar=False)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def alignment_score(samples: SampleSet, mixture: MixtureSpec) -> float:
    """Mean posterior probability that each sample belongs to its own
    conditioning component."""
    if samples.labels is None:
        raise ValueError("alignment score needs labeled samples")
    post = posterior_responsibilities(mixture, samples.points)
    return float(post[np.arange(len(samples.points)), samples.labels].mean())


@dataclass
class MaskSnapshot:
    timestep: int
    layer_id: str
    bits: np.ndarray          # flat 0/1 float per weight entry
    ratio: float              # fraction of zeros

    def to_json_line(self) -> str:
        packed = np.packbits(self.bits.astype(np.uint8), bitorder="little")
        encoded = base64.b64encode(packed.tobytes()).decode("ascii")
        return (
            "{"
            + f'"timestep": {self.timestep}, "layer": "{self.layer_id}", '
            + f'"size": {self.bits.size}, "ratio": {repr(float(self.ratio))}, '
            + f'"bits": "{encoded}"'
            + "}"
        )


@dataclass
class MaskStudySummary:
    timesteps: list[int]
    ratios: dict[str, list[float]]            # layer -> per-timestep ratio
    hamming: dict[str, np.ndarray]            # layer -> pairwise distance matrix
    ratio_std: dict[str, float]

    def positions_vary(self) -> bool:
        return any(h.max() > 0 for h in self.hamming.values())


def mask_study(
    model: DenoiserModel,
    generators: Sequence[MaskGenerator],
    timesteps: Sequence[int],
    probe_z: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    seed: int = 0,
) -> tuple[list[MaskSnapshot], MaskStudySummary]:
    """Hard masks for a fixed probe across timesteps, with per-timestep
    ratios and pairwise Hamming distances between timesteps.

    One gate-noise pattern per layer is drawn up front and reused at every
    timestep, so mask differences across timesteps reflect the generator's
    timestep dependence alone: a generator emitting constant logits yields
    zero Hamming distance everywhere.
    """
    if rng is None:
        rng = child_rng(seed, TAG_MASK_STUDY)
    probe = Tensor(np.atleast_2d(np.asarray(probe_z, dtype=np.float64)))
    noise = {
        g.config.layer_id: rng.gumbel(size=g.config.out_dim)
        - rng.gumbel(size=g.config.out_dim)
        for g in generators
    }
    snapshots: list[MaskSnapshot] = []
    per_layer_bits: dict[str, list[np.ndarray]] = {}
    for t in timesteps:
        t_arr = np.array([int(t)])
        for gen in generators:
            cfg_g = gen.config
            t_emb = Tensor(embed_timesteps(t_arr, cfg_g.temb_dim))
            logits = mask_logits(fuse_inputs(t_emb, probe, gen), gen).data[0]
            soft = 1.0 / (1.0 + np.exp(-(logits + noise[cfg_g.layer_id]) / cfg_g.tau))
            bits = np.where(soft >= cfg_g.delta, 1.0, 0.0)
            m = MaskTensor(Tensor(bits.reshape(1, *cfg_g.target_shape)), hard=True)
            snapshots.append(
                MaskSnapshot(int(t), cfg_g.layer_id, bits, mask_ratio(m))
            )
            per_layer_bits.setdefault(cfg_g.layer_id, []).append(bits)

    ratios = {
        layer: [float(np.count_nonzero(b == 0.0) / b.size) for b in bit_list]
        for layer, bit_list in per_layer_bits.items()
    }
    hamming = {}
    for layer, bit_list in per_layer_bits.items():
        k = len(bit_list)
        dist = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                d = float(np.count_nonzero(bit_list[i] != bit_list[j]))
                dist[i, j] = dist[j, i] = d
        hamming[layer] = dist
    ratio_std = {layer: float(np.std(r)) for layer, r in ratios.items()}
    summary = MaskStudySummary(
        timesteps=[int(t) for t in timesteps],
        ratios=ratios,
        hamming=hamming,
        ratio_std=ratio_std,
    )
    return snapshots, summary


def heldout_samples(cfg: ExperimentConfig) -> SampleSet:
    mixture = cfg.mixture()
    rng = child_rng(cfg.data.seed, TAG_DATA_HELDOUT)
    pts, labels = sample_points(mixture, cfg.data.n_heldout, rng)
    return SampleSet(pts, labels, provenance="heldout")


def run_report(
    cfg: ExperimentConfig,
    arms: Sequence[tuple[str, Checkpoint]],
) -> list[dict]:
    """Evaluate checkpoints: per (arm, seed), the Fréchet-Gaussian distance
    of generated samples against held-out data plus the alignment score."""
    if cfg.eval.per_class < 1:
        raise ValueError("empty evaluation: eval.per_class must be >= 1")
    if not arms:
        raise ValueError("empty evaluation: no checkpoints given")
    sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    mixture = cfg.mixture()
    held = heldout_samples(cfg)
    classes = list(range(cfg.model.num_classes))

    rows = []
    for arm_name, ckpt in arms:
        model = ckpt.denoiser()
        generators = ckpt.generators() or None
        for seed in cfg.eval.seeds:
            pts, labels = generate_labeled(
                model, generators, sched, classes, cfg.eval.per_class,
                cfg.sampler.num_inference_steps, cfg.sampler.eta,
                cfg.sampler.guidance_scale, int(seed),
            )
            generated = SampleSet(pts, labels, provenance=arm_name)
            rows.append({
                "arm": arm_name,
                "seed": int(seed),
                "fgd": frechet_gaussian(generated, held),
                "alignment": alignment_score(generated, mixture),
            })
    return rows
