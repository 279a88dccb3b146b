"""Binary checkpoint container.

Layout (little-endian)::

    b"FSV2" | u32 version | u32 entry count | u32 config length | config (UTF-8 key=value)
    per entry: u16 name length | name (UTF-8) | u8 rank | u64 dims[rank] | f32 payload (row-major)
    u64 CRC-32 of every preceding byte

Adapter tensors are stored under the ``adapter/`` prefix, backbone tensors
under their plain module names.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import (AdapterConfig, BackboneConfig, RunConfig, parse_kv,
                     section_from_kv)
from .errors import CheckpointError

MAGIC = b"FSV2"
FORMAT_VERSION = 1
ADAPTER_PREFIX = "adapter/"


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    config: dict[str, str]

    @property
    def has_adapter(self) -> bool:
        return any(k.startswith(ADAPTER_PREFIX) for k in self.entries)

    @property
    def kind(self) -> str:
        return "backbone+adapter" if self.has_adapter else "backbone-only"

    def backbone_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.entries.items() if not k.startswith(ADAPTER_PREFIX)}

    def adapter_state(self) -> dict[str, np.ndarray]:
        n = len(ADAPTER_PREFIX)
        return {k[n:]: v for k, v in self.entries.items() if k.startswith(ADAPTER_PREFIX)}


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: p.detach().cpu().numpy().astype(np.float32)
            for name, p in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    state = {}
    for name, ref in expected.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(ref.shape)}")
        state[name] = torch.as_tensor(np.array(arr), dtype=ref.dtype)
    module.load_state_dict(state)


def encode(entries: dict[str, np.ndarray], config_text: str = "") -> bytes:
    buf = io.BytesIO()
    cfg = config_text.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, len(entries), len(cfg)))
    buf.write(cfg)
    for name, arr in entries.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        a = np.ascontiguousarray(arr, dtype="<f4")
        if a.ndim > 255:
            raise CheckpointError(f"{name}: rank {a.ndim} exceeds 255")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<Q", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 4 + 12 + 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, trailer = blob[:-8], blob[-8:]
    stored = struct.unpack("<Q", trailer)[0]
    actual = zlib.crc32(body)
    if stored != actual:
        raise CheckpointError(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x} (file corrupted)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    try:
        _, count, cfg_len = struct.unpack_from("<III", body, 4)
        off = 16
        config_text = body[off:off + cfg_len].decode("utf-8")
        off += cfg_len
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            if name in entries:
                raise CheckpointError(f"duplicate entry {name!r}")
            entries[name] = arr.astype(np.float32)
        if off != len(body):
            raise CheckpointError(f"{len(body) - off} trailing bytes after last entry")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return Checkpoint(entries, parse_kv(config_text))


def save(path, backbone: nn.Module, adapter: nn.Module | None = None,
         config_text: str = "") -> None:
    entries = module_arrays(backbone)
    if adapter is not None:
        entries.update(module_arrays(adapter, ADAPTER_PREFIX))
    with open(path, "wb") as fh:
        fh.write(encode(entries, config_text))


def read(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)


def restore(ckpt: Checkpoint):
    """Rebuild ``(backbone, adapter or None)`` from a decoded checkpoint."""
    from .adapter import STAdapter
    from .backbone import Backbone

    bcfg = section_from_kv(BackboneConfig, "backbone", ckpt.config).validate()
    backbone = Backbone(bcfg)
    load_module_arrays(backbone, ckpt.backbone_state())
    adapter = None
    if ckpt.has_adapter:
        acfg = section_from_kv(AdapterConfig, "adapter", ckpt.config)
        adapter = STAdapter(acfg, bcfg.d_model)
        load_module_arrays(adapter, ckpt.adapter_state())
    return backbone, adapter


def load(path):
    return restore(read(path))


def run_config_text(cfg: RunConfig) -> str:
    from .config import dump_config
    return dump_config(cfg)
