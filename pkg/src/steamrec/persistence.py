"""Checkpoint files and ``key = value`` run configuration.

Checkpoint layout (all integers little-endian u32)::

    b"STEAMCKP" | version | len + UTF-8 config echo | item_count | total_rows
    | n_blocks | n_blocks x (len + UTF-8 name | rows | cols | rows*cols float32)
    | 32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import CorruptionConfig, Vocab
from .model import ModelConfig, ModelParameters
from .training import TrainConfig

MAGIC = b"STEAMCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, str]
    item_count: int
    total_rows: int
    blocks: dict[str, np.ndarray]


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _as_2d(a: np.ndarray) -> np.ndarray:
    return a.reshape(1, -1) if a.ndim == 1 else a


def save_checkpoint(params: ModelParameters, config: dict, vocab: Vocab, path) -> None:
    """Write atomically (temp file + rename)."""
    echo = "\n".join(f"{k} = {v}" for k, v in config.items()).encode("utf-8")
    named = params.named()
    parts = [MAGIC, _u32(VERSION), _u32(len(echo)), echo,
             _u32(vocab.item_count), _u32(vocab.total_rows), _u32(len(named))]
    for name, t in named:
        arr = _as_2d(t.data)
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.shape[0]), _u32(arr.shape[1]),
                  np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    """Parse and verify magic, version and checksum; nothing is returned on failure."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    off = len(MAGIC)

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", body, off)
        off += 4
        return v

    def chunk(n):
        nonlocal off
        out = body[off:off + n]
        off += n
        return out

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    echo = chunk(u32()).decode("utf-8")
    config = parse_config_text(echo) if echo else {}
    item_count, total_rows = u32(), u32()
    blocks = {}
    for _ in range(u32()):
        name = chunk(u32()).decode("utf-8")
        rows, cols = u32(), u32()
        blocks[name] = np.frombuffer(chunk(4 * rows * cols), dtype="<f4").reshape(rows, cols).copy()
    return Checkpoint(config, item_count, total_rows, blocks)


def params_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig) -> ModelParameters:
    """Rebuild parameters, checking every block's shape against ``cfg``."""
    vocab = Vocab(ckpt.item_count)
    params = ModelParameters.init(cfg, vocab, np.random.default_rng(0))
    expected = params.named()
    if set(ckpt.blocks) != {n for n, _ in expected}:
        missing = sorted({n for n, _ in expected} - set(ckpt.blocks))
        extra = sorted(set(ckpt.blocks) - {n for n, _ in expected})
        raise CheckpointError(f"parameter blocks differ from config: missing {missing}, unexpected {extra}")
    for name, t in expected:
        arr = ckpt.blocks[name]
        if arr.shape != _as_2d(t.data).shape:
            raise CheckpointError(
                f"block {name!r} has shape {arr.shape}, config expects {_as_2d(t.data).shape}")
        t.data = arr.astype(np.float64).reshape(t.data.shape)
    return params


# ------------------------------------------------------------------- config


@dataclass
class RunConfig:
    # model
    embed_dim: int = 64
    layers_encoder: int = 1
    layers_corrector: int = 1
    layers_recommender: int = 1
    dropout: float = 0.5
    max_raw_len: int = 50
    max_corrected_len: int = 60
    max_insert_decode: int = 5
    # training
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 0.001
    clip_lo: float = -5.0
    clip_hi: float = 5.0
    variant: str = "full"
    op_set: str = "full"
    # corruption
    p_keep: float = 0.4
    p_insert: float = 0.1
    p_delete: float = 0.5
    p_mask: float = 0.5
    max_continuous_insert: int = 5
    # run
    seed: int = 0
    dataset: str = ""
    out: str = "."

    def model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, layers_encoder=self.layers_encoder,
                           layers_corrector=self.layers_corrector,
                           layers_recommender=self.layers_recommender, dropout=self.dropout,
                           max_raw_len=self.max_raw_len, max_corrected_len=self.max_corrected_len,
                           max_insert_decode=self.max_insert_decode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, clip_lo=self.clip_lo,
                           clip_hi=self.clip_hi, seed=self.seed, variant=self.variant,
                           op_set=self.op_set)

    def corruption_config(self) -> CorruptionConfig:
        return CorruptionConfig(self.p_keep, self.p_insert, self.p_delete, self.p_mask,
                                self.max_continuous_insert)

    def echo(self) -> dict[str, str]:
        """Config fields that determine the parameters (paths excluded)."""
        return {k: str(v) for k, v in asdict(self).items() if k not in ("dataset", "out")}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def merge_config(*layers: dict) -> RunConfig:
    """Defaults, then each layer in order; later layers win.  Values may be strings."""
    types = {f.name: f.type for f in fields(RunConfig)}
    cfg = RunConfig()
    conv = {"int": int, "float": float, "str": str}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                setattr(cfg, key, conv[types[key]](value))
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {types[key]}") from None
    return cfg


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
