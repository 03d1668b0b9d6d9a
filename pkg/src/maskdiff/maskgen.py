"""Per-layer mask generators: timestep embedding + pooled sample in,
per-weight mask logits out.

Each generator serves exactly one maskable layer. The fused input is
FC(t_emb) + GAP(z); a 4-layer MLP with two interior ReLUs maps it to one
logit per weight entry, and the Gumbel-Sigmoid gate discretizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .denoiser import embed_timesteps
from .errors import ConfigError, ShapeError
from .masks import MaskTensor, gumbel_sigmoid
from .tensor import Tensor


@dataclass(frozen=True)
class MaskGeneratorConfig:
    layer_id: str
    target_shape: tuple[int, int]      # (C_out, C_in) of the masked layer
    in_channels: int                   # pooled-sample width C
    temb_dim: int                      # timestep-embedding width C1
    mlp_hidden: int = 64
    tau: float = 1.0
    delta: float = 0.5
    use_temb: bool = True
    use_sample: bool = True
    init_logit: float = 6.0

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not (self.use_temb or self.use_sample):
            raise ConfigError("at least one of use_temb/use_sample must be set")
        if self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be >= 1")

    @property
    def out_dim(self) -> int:
        return self.target_shape[0] * self.target_shape[1]


class MaskGenerator:
    """FC fuse + 4-layer MLP producing logits for one layer's weight mask.

    The last MLP layer starts at zero weights with a strongly positive
    bias, so a fresh generator emits near-all-ones masks and leaves the
    frozen model's behaviour intact at the start of training.
    """

    def __init__(self, config: MaskGeneratorConfig, rng: np.random.Generator):
        self.config = config
        c, c1, hm, c2 = (config.in_channels, config.temb_dim,
                         config.mlp_hidden, config.out_dim)

        def init(shape, fan_in):
            return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in),
                          requires_grad=True)

        self.params: dict[str, Tensor] = {
            "fc.w": init((c, c1), c1),
            "fc.b": Tensor(np.zeros(c), requires_grad=True),
            "mlp1.w": init((hm, c), c),
            "mlp1.b": Tensor(np.zeros(hm), requires_grad=True),
            "mlp2.w": init((hm, hm), hm),
            "mlp2.b": Tensor(np.zeros(hm), requires_grad=True),
            "mlp3.w": init((hm, hm), hm),
            "mlp3.b": Tensor(np.zeros(hm), requires_grad=True),
            "mlp4.w": Tensor(np.zeros((c2, hm)), requires_grad=True),
            "mlp4.b": Tensor(np.full(c2, config.init_logit), requires_grad=True),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    @classmethod
    def from_arrays(
        cls, config: MaskGeneratorConfig, arrays: Mapping[str, np.ndarray]
    ) -> "MaskGenerator":
        gen = cls(config, np.random.default_rng(0))
        if set(arrays) != set(gen.params):
            raise ConfigError("generator parameter names do not match the layout")
        for name, arr in arrays.items():
            if arr.shape != gen.params[name].shape:
                raise ShapeError(
                    f"generator parameter {name} has shape {arr.shape}, "
                    f"expected {gen.params[name].shape}"
                )
            gen.params[name] = Tensor(arr, requires_grad=True)
        return gen

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return T.add_bias(
            T.matmul(x, T.transpose(self.params[f"{name}.w"])),
            self.params[f"{name}.b"],
        )


def fuse_inputs(t_emb: Tensor, z: Tensor, gen: MaskGenerator) -> Tensor:
    """FC(t_emb) + GAP(z), with either branch zeroed by the ablation flags."""
    cfg = gen.config
    if not (cfg.use_temb or cfg.use_sample):
        raise ConfigError("generator has no enabled input branch")
    batch = z.shape[0]
    parts = []
    if cfg.use_temb:
        if t_emb.shape != (batch, cfg.temb_dim):
            raise ShapeError(
                f"t_emb must be ({batch}, {cfg.temb_dim}), got {t_emb.shape}"
            )
        parts.append(gen._linear(t_emb, "fc"))
    if cfg.use_sample:
        pooled = T.gap(z)
        if pooled.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"pooled sample width {pooled.shape[1]} != configured {cfg.in_channels}"
            )
        parts.append(pooled)
    if len(parts) == 1:
        return parts[0]
    return T.add(parts[0], parts[1])


def mask_logits(fused: Tensor, gen: MaskGenerator) -> Tensor:
    """4-layer MLP with two interior ReLUs mapping (B, C) to (B, C2)."""
    if fused.ndim != 2 or fused.shape[1] != gen.config.in_channels:
        raise ShapeError(
            f"fused input must be (B, {gen.config.in_channels}), got {fused.shape}"
        )
    h = T.relu(gen._linear(fused, "mlp1"))
    h = T.relu(gen._linear(h, "mlp2"))
    h = gen._linear(h, "mlp3")
    return gen._linear(h, "mlp4")


def generate_masks(
    generators: Sequence[MaskGenerator],
    t,
    z,
    hard: bool,
    rng: np.random.Generator,
) -> dict[str, MaskTensor]:
    """Run every generator on (t, z): returns {layer_id: MaskTensor}.

    t may be a single timestep or one per sample; z is the current latent
    batch. Generators must target distinct layers.
    """
    layer_ids = [g.config.layer_id for g in generators]
    if len(set(layer_ids)) != len(layer_ids):
        raise ConfigError(f"duplicate generator layers: {layer_ids}")
    zt = z if isinstance(z, Tensor) else Tensor(z)
    batch = zt.shape[0]
    ts = np.full(batch, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t)

    out: dict[str, MaskTensor] = {}
    for gen in generators:
        cfg = gen.config
        t_emb = Tensor(embed_timesteps(ts, cfg.temb_dim))
        logits = mask_logits(fuse_inputs(t_emb, zt, gen), gen)
        c_out, c_in = cfg.target_shape
        logits3 = T.reshape(logits, (batch, c_out, c_in))
        out[cfg.layer_id] = gumbel_sigmoid(logits3, cfg.tau, cfg.delta, hard, rng)
    return out


def build_generator_configs(
    model_config,
    mlp_hidden: int = 64,
    tau: float = 1.0,
    delta: float = 0.5,
    use_temb: bool = True,
    use_sample: bool = True,
    init_logit: float = 6.0,
    layers: Optional[Sequence[str]] = None,
) -> list[MaskGeneratorConfig]:
    """One generator config per maskable layer of a denoiser config."""
    layer_ids = tuple(layers) if layers is not None else model_config.maskable_layers
    configs = []
    for layer_id in layer_ids:
        configs.append(
            MaskGeneratorConfig(
                layer_id=layer_id,
                target_shape=model_config.layer_shape(layer_id),
                in_channels=model_config.data_dim,
                temb_dim=model_config.temb_dim,
                mlp_hidden=mlp_hidden,
                tau=tau,
                delta=delta,
                use_temb=use_temb,
                use_sample=use_sample,
                init_logit=init_logit,
            )
        )
    return configs
