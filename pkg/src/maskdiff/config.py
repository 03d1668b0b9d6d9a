"""Experiment configuration: nested dataclasses, a flat key=value text
format, and canonical serialization (used both for preset files and for
the config snapshot embedded in checkpoints)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .data import MixtureSpec, gaussian_ring
from .denoiser import DenoiserConfig
from .diffusion import SamplerConfig
from .errors import ConfigError

TRAIN_MODES = ("base", "full_finetune", "mask_generator")
REWARD_KINDS = ("mode_proximity", "mixture_loglik")


@dataclass(frozen=True)
class DataConfig:
    num_components: int = 8
    radius: float = 4.0
    component_std: float = 0.3
    normalize: bool = True
    n_train: int = 5000
    n_heldout: int = 2000
    seed: int = 1


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class MaskSettings:
    """Structure shared by every per-layer mask generator."""

    mlp_hidden: int = 64
    tau: float = 1.0
    delta: float = 0.5
    init_logit: float = 6.0


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "base"
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-2
    cond_dropout: float = 0.1
    seed: int = 0
    use_temb: bool = True      # ablation arms for the mask generator inputs
    use_sample: bool = True


@dataclass(frozen=True)
class RewardSpec:
    kind: str
    weight: float
    params: Optional[MixtureSpec] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ConfigError(
                f"unknown reward kind {self.kind!r}; choose from {REWARD_KINDS}"
            )


@dataclass(frozen=True)
class FreeOptConfig:
    iterations: int = 15       # inner optimization steps per timestep
    lr: float = 1e-2
    steps: int = 15            # sampler steps
    guidance: float = 7.5
    seed: int = 0
    tau: float = 1.0
    delta: float = 0.5
    # Logits start just above the gate threshold: the committed mask is all
    # ones until the optimizer pushes an entry down, and iterations*lr of
    # Adam travel per timestep is enough to actually cross. Far above the
    # threshold the committed mask could never change.
    init_logit: float = 0.5
    reset_per_timestep: bool = False
    direct_z0: bool = False


@dataclass(frozen=True)
class EvalConfig:
    per_class: int = 250
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    mask: MaskSettings = field(default_factory=MaskSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    # Desk-scale default: unit guidance gives the best fit to the analytic
    # mixture; stronger guidance over-concentrates samples at the modes.
    sampler: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(guidance_scale=1.0))
    freeopt: FreeOptConfig = field(default_factory=FreeOptConfig)
    rewards: tuple[RewardSpec, ...] = (
        RewardSpec("mode_proximity", 1.0),
        RewardSpec("mixture_loglik", 5.0),
    )
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        def bad(path, msg):
            raise ConfigError(f"{path}: {msg}")

        if self.data.num_components != self.model.num_classes:
            bad("model.num_classes",
                f"must equal data.num_components ({self.data.num_components})")
        if self.data.n_train < 1:
            bad("data.n_train", "must be positive")
        if self.data.seed < 0 or self.train.seed < 0:
            bad("data.seed" if self.data.seed < 0 else "train.seed",
                "must be non-negative")
        if self.schedule.timesteps < 1:
            bad("schedule.timesteps", "must be positive")
        if not 0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            bad("schedule.beta_start", "betas must satisfy 0 < start <= end < 1")
        if self.train.mode not in TRAIN_MODES:
            bad("train.mode", f"must be one of {TRAIN_MODES}")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            bad("train.epochs", "epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.train.cond_dropout < 1.0:
            bad("train.cond_dropout", "must lie in [0, 1)")
        try:
            self.sampler.validate(self.schedule.timesteps)
        except ConfigError as e:
            raise ConfigError(str(e)) from None
        if self.freeopt.iterations < 0:
            bad("freeopt.iterations", "must be >= 0")
        if not 1 <= self.freeopt.steps <= self.schedule.timesteps:
            bad("freeopt.steps",
                f"must lie in [1, schedule.timesteps={self.schedule.timesteps}]")
        if self.freeopt.seed < 0:
            bad("freeopt.seed", "must be non-negative")
        if self.eval.per_class < 0 or any(s < 0 for s in self.eval.seeds):
            bad("eval.per_class", "eval sizes and seeds must be non-negative")
        return self

    def mixture(self) -> MixtureSpec:
        return gaussian_ring(
            num_components=self.data.num_components,
            radius=self.data.radius,
            component_std=self.data.component_std,
            normalize=self.data.normalize,
        )

    def resolved_rewards(self) -> tuple[RewardSpec, ...]:
        mix = self.mixture()
        return tuple(dataclasses.replace(r, params=mix) for r in self.rewards)


_SECTIONS = ("data", "schedule", "model", "mask", "train", "sampler",
             "freeopt", "eval")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    raise ConfigError(f"cannot serialize value of type {type(value).__name__}")


def _parse_value(path: str, text: str, ftype):
    text = text.strip()
    try:
        if ftype is bool:
            if text not in ("true", "false"):
                raise ValueError("expected true or false")
            return text == "true"
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is str:
            return text
        if ftype in (tuple[int, ...], "tuple[int, ...]"):
            return tuple(int(v) for v in text.split(",")) if text else ()
        if ftype in (tuple[str, ...], "tuple[str, ...]"):
            return tuple(v.strip() for v in text.split(",")) if text else ()
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    raise ConfigError(f"{path}: unsupported field type {ftype}")


def _parse_rewards(text: str) -> tuple[RewardSpec, ...]:
    specs = []
    if text.strip():
        for chunk in text.split(","):
            if ":" not in chunk:
                raise ConfigError(
                    f"rewards: expected kind:weight entries, got {chunk!r}"
                )
            kind, weight = chunk.rsplit(":", 1)
            try:
                specs.append(RewardSpec(kind.strip(), float(weight)))
            except ValueError:
                raise ConfigError(f"rewards: bad weight in {chunk!r}") from None
    return tuple(specs)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: fixed section and field order, one key per line."""
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            if f.name == "params":  # runtime-resolved, never serialized
                continue
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    lines.append(
        "rewards = " + ",".join(f"{r.kind}:{repr(float(r.weight))}"
                                for r in cfg.rewards)
    )
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat dotted key=value tree into an ExperimentConfig."""
    values: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    rewards: Optional[tuple[RewardSpec, ...]] = None
    section_types = {s: type(getattr(ExperimentConfig(), s)) for s in _SECTIONS}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key == "rewards":
            rewards = _parse_rewards(value)
            continue
        if "." not in key:
            raise ConfigError(f"{key}: unknown key")
        section, _, name = key.partition(".")
        if section not in values:
            raise ConfigError(f"{key}: unknown section {section!r}")
        ftypes = {f.name: f.type for f in fields(section_types[section])}
        if name not in ftypes:
            raise ConfigError(f"{key}: unknown key")
        hints = _resolved_hints(section_types[section])
        values[section][name] = _parse_value(key, value, hints[name])

    kwargs = {}
    for section in _SECTIONS:
        cls = section_types[section]
        try:
            kwargs[section] = cls(**values[section])
        except (TypeError, ConfigError) as e:
            raise ConfigError(f"{section}: {e}") from None
    if rewards is not None:
        kwargs["rewards"] = rewards
    return ExperimentConfig(**kwargs).validate()


def _resolved_hints(cls) -> dict[str, type]:
    import typing

    return typing.get_type_hints(cls)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply `section.key=value` command-line overrides on top of a config."""
    if not pairs:
        return cfg
    text = dump_config(cfg) + "\n".join(pairs) + "\n"
    return parse_config(text)
