"""Binary weight masks: the Gumbel-Sigmoid gate and masked linear algebra.

A mask is a per-sample (B, C_out, C_in) tensor multiplied onto a frozen
(C_out, C_in) weight matrix; the masked weights then act on the input via
batched matrix multiplication. Bias vectors are never masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class MaskTensor:
    """Mask values plus whether they were discretized.

    Hard masks contain only 0.0 and 1.0; soft masks are open-interval
    sigmoid outputs (float saturation aside).
    """

    values: Tensor
    hard: bool

    def __post_init__(self):
        if self.hard:
            v = self.values.data
            if not np.all((v == 0.0) | (v == 1.0)):
                raise ValueError("hard mask contains values outside {0, 1}")


def gumbel_sigmoid(
    logits: Tensor,
    tau: float,
    delta: float,
    hard: bool,
    rng: np.random.Generator,
) -> MaskTensor:
    """Stochastic Bernoulli relaxation of the logits.

    Soft value: sigmoid((logits + g1 - g2) / tau) with independent standard
    Gumbel draws g1, g2. With hard=True the forward value is thresholded at
    delta (ties go to 1) and the gradient passes straight through the soft
    value.
    """
    _check_gate_params(tau, delta)
    g1 = rng.gumbel(size=logits.shape)
    g2 = rng.gumbel(size=logits.shape)
    noisy = T.scale(T.add(logits, Tensor(g1 - g2)), 1.0 / tau)
    soft = T.sigmoid(noisy)
    if not hard:
        return MaskTensor(values=soft, hard=False)
    return MaskTensor(values=T.straight_through_threshold(soft, delta), hard=True)


def deterministic_mask(logits: Tensor, tau: float, delta: float) -> MaskTensor:
    """Noise-free hard gate: 1 where sigmoid(logits / tau) >= delta.

    Used when committing an optimized mask so the decision depends only on
    the logits, not on a fresh noise draw.
    """
    _check_gate_params(tau, delta)
    soft = T.sigmoid(T.scale(logits, 1.0 / tau))
    return MaskTensor(values=T.straight_through_threshold(soft, delta), hard=True)


def _check_gate_params(tau: float, delta: float) -> None:
    if tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {delta}")


def apply_mask(w: Tensor, m: Tensor) -> Tensor:
    """Masked weights m * w, broadcasting w over the batch axis of m."""
    if isinstance(m, MaskTensor):
        m = m.values
    if w.ndim != 2 or m.ndim != 3 or m.shape[1:] != w.shape:
        raise ShapeError(
            f"mask of shape {m.shape} does not fit weights of shape {w.shape}"
        )
    return T.mul(m, w)


def masked_linear(h: Tensor, w_hat: Tensor, bias: Tensor) -> Tensor:
    """Batched masked layer: bmm(h, w_hat) + bias; the bias is unmasked."""
    out = T.bmm(h, w_hat)
    return T.add_bias(out, bias)


def mask_ratio(m: MaskTensor) -> float:
    """Fraction of entries zeroed out by a hard mask."""
    if not m.hard:
        raise ValueError("mask ratio is only defined for hard masks")
    v = m.values.data
    return float(np.count_nonzero(v == 0.0) / v.size)
