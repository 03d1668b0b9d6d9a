"""The synthetic 2D mixture dataset and its ground-truth parameters.

An 8-component Gaussian ring (radius 4, component std 0.3) rescaled to
unit per-dimension variance. Every class label is the index of the
component that generated the point, which makes exact posteriors,
densities, and mode locations available to the metrics and rewards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class MixtureSpec:
    """Ground-truth isotropic Gaussian mixture."""

    means: np.ndarray           # (K, d)
    component_std: float
    weights: np.ndarray = field(default=None)  # (K,), uniform when None

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if self.weights is None:
            object.__setattr__(
                self, "weights", np.full(len(means), 1.0 / len(means))
            )
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(means),) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("mixture weights must sum to 1, one per component")
            object.__setattr__(self, "weights", w)
        if self.component_std <= 0:
            raise ConfigError("component_std must be positive")

    @property
    def num_components(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def gaussian_ring(
    num_components: int = 8,
    radius: float = 4.0,
    component_std: float = 0.3,
    normalize: bool = True,
) -> MixtureSpec:
    """Equally spaced components on a circle, optionally unit-variance scaled."""
    if num_components < 1:
        raise ConfigError("num_components must be >= 1")
    angles = 2.0 * np.pi * np.arange(num_components) / num_components
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    std = float(component_std)
    if normalize:
        # Per-dimension mixture variance, averaged over dimensions.
        var = std**2 + float(np.mean(np.sum(means**2, axis=1)) / means.shape[1])
        scale = 1.0 / np.sqrt(var)
        means = means * scale
        std = std * scale
    return MixtureSpec(means=means, component_std=std)


def sample_points(spec: MixtureSpec, n: int, rng: np.random.Generator):
    """Draw n labeled points: returns (points (n,d), labels (n,))."""
    labels = rng.choice(spec.num_components, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim)) * spec.component_std
    return spec.means[labels] + noise, labels.astype(np.int64)


def mixture_log_density(spec: MixtureSpec, x: np.ndarray) -> np.ndarray:
    """log p(x) under the mixture, for an (n, d) array of points."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = spec.dim
    var = spec.component_std**2
    # (n, K) squared distances
    sq = ((x[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=2)
    log_norm = -0.5 * d * np.log(2.0 * np.pi * var)
    comp = np.log(spec.weights)[None, :] + log_norm - sq / (2.0 * var)
    m = comp.max(axis=1, keepdims=True)
    return (m[:, 0] + np.log(np.exp(comp - m).sum(axis=1)))


def posterior_responsibilities(spec: MixtureSpec, x: np.ndarray) -> np.ndarray:
    """P(component k | x) for each row of x: returns (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = spec.component_std**2
    sq = ((x[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=2)
    comp = np.log(spec.weights)[None, :] - sq / (2.0 * var)
    comp -= comp.max(axis=1, keepdims=True)
    w = np.exp(comp)
    return w / w.sum(axis=1, keepdims=True)
