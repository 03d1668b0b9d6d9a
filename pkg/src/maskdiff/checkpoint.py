"""Single-file checkpoint format: a text header (version, seed, digest,
config snapshot, blob directory) followed by raw little-endian float64
blobs. Loading and re-saving reproduces the file byte for byte."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .config import ExperimentConfig, dump_config, parse_config
from .denoiser import DenoiserModel
from .errors import CheckpointError
from .maskgen import MaskGenerator, build_generator_configs

FORMAT_VERSION = 1
MAGIC = "maskdiff-checkpoint"

DENOISER_PREFIX = "denoiser."
GENERATOR_PREFIX = "maskgen."


@dataclass
class Checkpoint:
    """In-memory checkpoint: config snapshot plus named parameter blobs."""

    config: ExperimentConfig
    arrays: dict[str, np.ndarray]
    seed: int = 0
    train_log_digest: str = "-"
    format_version: int = FORMAT_VERSION

    def denoiser(self) -> DenoiserModel:
        weights = {
            name[len(DENOISER_PREFIX):]: arr
            for name, arr in self.arrays.items()
            if name.startswith(DENOISER_PREFIX)
        }
        return DenoiserModel.from_arrays(self.config.model, weights)

    def has_generators(self) -> bool:
        return any(n.startswith(GENERATOR_PREFIX) for n in self.arrays)

    def generators(self) -> list[MaskGenerator]:
        """Reconstruct per-layer mask generators stored in this checkpoint."""
        if not self.has_generators():
            return []
        by_layer: dict[str, dict[str, np.ndarray]] = {}
        for name, arr in self.arrays.items():
            if not name.startswith(GENERATOR_PREFIX):
                continue
            layer, _, pname = name[len(GENERATOR_PREFIX):].partition(".")
            by_layer.setdefault(layer, {})[pname] = arr
        configs = build_generator_configs(
            self.config.model,
            mlp_hidden=self.config.mask.mlp_hidden,
            tau=self.config.mask.tau,
            delta=self.config.mask.delta,
            init_logit=self.config.mask.init_logit,
            use_temb=self.config.train.use_temb,
            use_sample=self.config.train.use_sample,
            layers=sorted(by_layer),
        )
        return [MaskGenerator.from_arrays(c, by_layer[c.layer_id]) for c in configs]


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    config_text = dump_config(ckpt.config)
    config_lines = config_text.splitlines()

    names = sorted(ckpt.arrays)
    header = [
        f"{MAGIC} {ckpt.format_version}",
        f"seed {ckpt.seed}",
        f"digest {ckpt.train_log_digest or '-'}",
        f"config {len(config_lines)}",
        *config_lines,
    ]
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype=np.float64)
        raw = arr.astype("<f8").tobytes()
        dims = ",".join(str(d) for d in arr.shape) or "0"
        header.append(f"blob {name} {dims} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    header.append("end")
    payload = ("\n".join(header) + "\n").encode("utf-8") + b"".join(blobs)
    Path(path).write_bytes(payload)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()

    lines, binary = _split_header(raw, p)
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{p}: not a checkpoint file")
    version = int(first[1])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{p}: format version {version} is not supported (want {FORMAT_VERSION})"
        )

    idx = 1
    seed = _expect_kv(lines, idx, "seed", p)
    digest = lines[2].split(" ", 1)[1] if lines[2].startswith("digest ") else None
    if digest is None:
        raise CheckpointError(f"{p}: missing digest line")
    if not lines[3].startswith("config "):
        raise CheckpointError(f"{p}: missing config block")
    n_config = int(lines[3].split(" ", 1)[1])
    config_lines = lines[4:4 + n_config]
    if len(config_lines) != n_config:
        raise CheckpointError(f"{p}: truncated config block")
    config = parse_config("\n".join(config_lines) + "\n")

    arrays: dict[str, np.ndarray] = {}
    pos = 4 + n_config
    while pos < len(lines) and lines[pos] != "end":
        parts = lines[pos].split()
        if len(parts) != 5 or parts[0] != "blob":
            raise CheckpointError(f"{p}: malformed blob directory line {lines[pos]!r}")
        _, name, dims, offset_s, nbytes_s = parts
        shape = tuple(int(d) for d in dims.split(",")) if dims != "0" else ()
        offset, nbytes = int(offset_s), int(nbytes_s)
        expected = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if nbytes != expected:
            raise CheckpointError(
                f"{p}: blob {name} declares {nbytes} bytes but shape "
                f"{shape} needs {expected}"
            )
        if offset + nbytes > len(binary):
            raise CheckpointError(f"{p}: truncated blob {name}")
        arr = np.frombuffer(binary[offset:offset + nbytes], dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64, copy=True)
        pos += 1
    if pos >= len(lines):
        raise CheckpointError(f"{p}: missing end marker")
    total = sum(a.size * 8 for a in arrays.values())
    if len(binary) != total:
        raise CheckpointError(
            f"{p}: binary section has {len(binary)} bytes, directory expects {total}"
        )
    return Checkpoint(
        config=config,
        arrays=arrays,
        seed=int(seed),
        train_log_digest=digest,
        format_version=version,
    )


def _split_header(raw: bytes, p: Path) -> tuple[list[str], bytes]:
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        if raw.startswith(b"end\n"):
            return ["end"], raw[4:]
        raise CheckpointError(f"{p}: missing end marker")
    header = raw[:cut + len(marker)]
    try:
        lines = header.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        raise CheckpointError(f"{p}: header is not valid UTF-8") from None
    return lines, raw[cut + len(marker):]


def _expect_kv(lines: list[str], idx: int, key: str, p: Path) -> str:
    if idx >= len(lines) or not lines[idx].startswith(key + " "):
        raise CheckpointError(f"{p}: missing {key} line")
    return lines[idx].split(" ", 1)[1]
