"""Binary checkpoints: an ordered list of named float64 blocks.

Layout (all integers little-endian)::

    magic  b"HCPL"   version u32   block_count u32
    per block: name_len u32, name (utf-8), rank u32, extents u64 * rank,
               float64 values in C order

Rank-0 blocks hold scalars such as ``meta.boundary_k``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoders import DualEncoder, EncoderConfig
from .errors import CheckpointError, ConfigError, DimensionError
from .promptflow import FlowConfig, PromptStack, init_prompt_stack

MAGIC = b"HCPL"
VERSION = 1


def write_blocks(path, blocks: Mapping[str, np.ndarray]) -> None:
    out = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, value in blocks.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def read_blocks(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path} is truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(take(f"<{n}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        values = take(f"<{int(np.prod(shape, dtype=np.int64))}d")
        blocks[name] = np.array(values, dtype=np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path} has {len(buf) - pos} trailing bytes")
    return blocks


def save_stack(stack: PromptStack, path) -> None:
    blocks = {"meta.boundary_k": np.array(float(stack.boundary_k))}
    blocks.update(stack.state_dict())
    write_blocks(path, blocks)


def load_stack(path, config: EncoderConfig, flow: FlowConfig, depth: int | None = None) -> PromptStack:
    blocks = read_blocks(path)
    if "meta.boundary_k" not in blocks:
        raise CheckpointError(f"{path} lacks meta.boundary_k")
    k = int(blocks.pop("meta.boundary_k"))
    if depth is None:
        depth = sum(name.startswith("prompts.text.") for name in blocks)
    try:
        stack = init_prompt_stack(config, k, 0, flow, depth=depth)
        extra = set(blocks) - {name for name, _ in stack.named_parameters()}
        if extra:
            raise CheckpointError(f"{path} has unexpected blocks {sorted(extra)[:3]}")
        stack.load_state(blocks)
    except (ConfigError, DimensionError) as exc:
        raise CheckpointError(f"{path} does not match the configuration: {exc}") from exc
    return stack


def save_encoder(encoder: DualEncoder, path) -> None:
    write_blocks(path, {name: t.data for name, t in encoder.named_parameters()})


def load_encoder(path, config: EncoderConfig) -> DualEncoder:
    enc = DualEncoder(config, seed=0)
    try:
        enc.load_state(read_blocks(path))
    except (ConfigError, DimensionError) as exc:
        raise CheckpointError(f"{path} does not match the encoder configuration: {exc}") from exc
    return enc.freeze()
