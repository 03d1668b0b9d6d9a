"""A small conditional noise-prediction network standing in for a U-Net.

Topology: data -> hidden -> hidden -> data with the timestep embedding and
the class embedding projected into the first hidden layer and an additive
input-to-output skip. The two hidden linear layers are maskable: when a
per-sample weight mask is supplied for one of them, the layer is computed
through the batched masked-weight path instead of the plain one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .masks import MaskTensor, apply_mask, masked_linear
from .tensor import Tensor

Timesteps = Union[int, Sequence[int], np.ndarray]


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding: half sines, half cosines, geometric
    frequencies from 1 down to 1/10000."""
    return embed_timesteps(np.array([t]), dim)[0]


def embed_timesteps(ts: np.ndarray, dim: int) -> np.ndarray:
    if dim <= 0 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and positive, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class DenoiserConfig:
    data_dim: int = 2
    hidden_dim: int = 32
    temb_dim: int = 32
    num_classes: int = 8
    maskable_layers: tuple[str, ...] = ("hidden1", "hidden2")

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        bad = set(self.maskable_layers) - {"hidden1", "hidden2"}
        if bad:
            raise ConfigError(f"unknown maskable layers: {sorted(bad)}")

    @property
    def null_class(self) -> int:
        """Condition id used for the unconditional branch."""
        return self.num_classes

    def layer_shape(self, layer_id: str) -> tuple[int, int]:
        shapes = {
            "hidden1": (self.hidden_dim, self.data_dim),
            "hidden2": (self.hidden_dim, self.hidden_dim),
        }
        if layer_id not in shapes:
            raise ConfigError(f"no such layer: {layer_id!r}")
        return shapes[layer_id]


class DenoiserModel:
    """Noise predictor eps(z_t, t, c) with named float64 parameter tensors."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        d, h, e = config.data_dim, config.hidden_dim, config.temb_dim

        def init(shape, fan_in):
            return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in),
                          requires_grad=True)

        self.params: dict[str, Tensor] = {
            "class_emb": Tensor(rng.standard_normal((config.num_classes + 1, e)),
                                requires_grad=True),
            "temb_proj.w": init((h, e), e),
            "cls_proj.w": init((h, e), e),
            "hidden1.w": init((h, d), d),
            "hidden1.b": Tensor(np.zeros(h), requires_grad=True),
            "hidden2.w": init((h, h), h),
            "hidden2.b": Tensor(np.zeros(h), requires_grad=True),
            "out.w": init((d, h), h),
            "out.b": Tensor(np.zeros(d), requires_grad=True),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    @classmethod
    def from_arrays(
        cls, config: DenoiserConfig, arrays: Mapping[str, np.ndarray]
    ) -> "DenoiserModel":
        model = cls(config, np.random.default_rng(0))
        if set(arrays) != set(model.params):
            raise ConfigError("parameter names do not match the model layout")
        for name, arr in arrays.items():
            if arr.shape != model.params[name].shape:
                raise ShapeError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {model.params[name].shape}"
                )
            model.params[name] = Tensor(arr, requires_grad=True)
        return model

    def _plain_linear(self, x: Tensor, layer: str) -> Tensor:
        w, b = self.params[f"{layer}.w"], self.params[f"{layer}.b"]
        return T.add_bias(T.matmul(x, T.transpose(w)), b)

    def _layer(self, x: Tensor, layer: str, masks) -> Tensor:
        if masks is None or layer not in masks:
            return self._plain_linear(x, layer)
        m = masks[layer]
        values = m.values if isinstance(m, MaskTensor) else m
        w, b = self.params[f"{layer}.w"], self.params[f"{layer}.b"]
        batch = x.shape[0]
        if values.shape != (batch, *w.shape):
            raise ShapeError(
                f"mask for {layer} has shape {values.shape}, "
                f"expected {(batch, *w.shape)}"
            )
        h3 = T.reshape(x, (batch, 1, w.shape[1]))
        out3 = masked_linear(h3, apply_mask(w, values), b)
        return T.reshape(out3, (batch, w.shape[0]))

    def forward(
        self,
        z_t,
        t: Timesteps,
        cond: Sequence[int],
        masks: Optional[Mapping[str, object]] = None,
    ) -> Tensor:
        cfg = self.config
        z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z.ndim != 2 or z.shape[1] != cfg.data_dim:
            raise ShapeError(f"input must be (B, {cfg.data_dim}), got {z.shape}")
        batch = z.shape[0]

        if masks is not None:
            extra = set(masks) - set(cfg.maskable_layers)
            if extra:
                raise ConfigError(f"masks supplied for non-maskable layers: {sorted(extra)}")

        ts = np.full(batch, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t)
        if ts.shape != (batch,):
            raise ShapeError(f"need one timestep or {batch} of them, got {ts.shape}")
        temb = Tensor(embed_timesteps(ts, cfg.temb_dim))

        cond = np.asarray(cond, dtype=np.int64)
        if cond.shape != (batch,):
            raise ShapeError(f"need {batch} condition ids, got {cond.shape}")
        cemb = T.embedding(self.params["class_emb"], cond)

        h = self._layer(z, "hidden1", masks)
        h = T.add(h, T.matmul(temb, T.transpose(self.params["temb_proj.w"])))
        h = T.add(h, T.matmul(cemb, T.transpose(self.params["cls_proj.w"])))
        h = T.relu(h)
        h = T.relu(self._layer(h, "hidden2", masks))
        out = self._plain_linear(h, "out")
        return T.add(out, z)
