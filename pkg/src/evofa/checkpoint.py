"""Model persistence: a single self-describing binary file per model.

Layout: magic "EVCK", format version (u32 LE), JSON header length (u64 LE),
JSON header, float32 LE payload, trailing CRC-64 (u64 LE) over everything
before it. The header carries the architecture, a named parameter table with
offsets into the payload, and the batch-norm running statistics table, so a
file can be loaded without any out-of-band knowledge. Parameters are stored
as float32; loading widens back to float64.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import BatchNormState, ParamGroup, Tensor
from .backbone import BackboneConfig, Model
from .errors import CheckpointError

MAGIC = b"EVCK"
FORMAT_VERSION = 1

# CRC-64/ECMA-182: polynomial 0x42F0E1EBA9EA3693, no reflection, zero init/xorout.
_POLY = 0x42F0E1EBA9EA3693
_MASK = 0xFFFFFFFFFFFFFFFF


def _build_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 56
        for _ in range(8):
            crc = ((crc << 1) ^ _POLY if crc & (1 << 63) else crc << 1) & _MASK
        table.append(crc)
    return table


_TABLE = _build_table()


def crc64(data: bytes, crc: int = 0) -> int:
    for b in data:
        crc = ((crc << 8) & _MASK) ^ _TABLE[((crc >> 56) ^ b) & 0xFF]
    return crc


@dataclass(frozen=True)
class Checkpoint:
    """Decoded checkpoint: header fields plus the raw float32 payload."""

    version: int
    config: BackboneConfig
    params: tuple[dict, ...]  # {group, name, shape, offset}
    bn: tuple[dict, ...]  # {mean_offset, var_offset, channels, momentum, eps}
    payload: np.ndarray  # float32, flat


def _header_dict(model: Model) -> tuple[dict, np.ndarray]:
    parts: list[np.ndarray] = []
    params = []
    offset = 0
    for group in model.groups():
        for name, t in group.entries:
            flat = np.ascontiguousarray(t.data, dtype=np.float32).ravel()
            params.append(
                {"group": group.name, "name": name, "shape": list(t.shape), "offset": offset}
            )
            parts.append(flat)
            offset += flat.size
    bn = []
    for state in model.bn_states:
        mean = state.running_mean.astype(np.float32)
        var = state.running_var.astype(np.float32)
        bn.append(
            {
                "mean_offset": offset,
                "var_offset": offset + mean.size,
                "channels": int(mean.size),
                "momentum": state.momentum,
                "eps": state.eps,
            }
        )
        parts.extend([mean, var])
        offset += mean.size + var.size
    config = asdict(model.config)
    config["conv_channels"] = list(config["conv_channels"])
    header = {"backbone": config, "params": params, "bn": bn, "total_floats": offset}
    payload = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
    return header, payload


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """Serialize the model atomically; returns the written path."""
    path = Path(path)
    header, payload = _header_dict(model)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = (
        MAGIC
        + struct.pack("<I", FORMAT_VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + payload.astype("<f4").tobytes()
    )
    blob += struct.pack("<Q", crc64(blob))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Decode and verify a checkpoint file without building a model."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 4 + 4 + 8 + 8:
        raise CheckpointError(f"checkpoint {path} is truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"checkpoint {path} has bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + header_len
    if header_end + 8 > len(raw):
        raise CheckpointError(f"checkpoint {path} is truncated inside its header")
    (stored_crc,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    actual_crc = crc64(raw[:-8])
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"checkpoint {path} failed its checksum "
            f"(stored {stored_crc:#018x}, computed {actual_crc:#018x})"
        )
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint {path} has an unreadable header: {e}") from e
    payload = np.frombuffer(raw[header_end:-8], dtype="<f4")
    total = header.get("total_floats", -1)
    if payload.size != total:
        raise CheckpointError(
            f"checkpoint {path} payload holds {payload.size} floats, header says {total}"
        )
    backbone = dict(header["backbone"])
    backbone["conv_channels"] = tuple(backbone["conv_channels"])
    return Checkpoint(
        version=version,
        config=BackboneConfig(**backbone),
        params=tuple(header["params"]),
        bn=tuple(header["bn"]),
        payload=payload,
    )


def _slice(payload: np.ndarray, offset: int, size: int, what: str, path) -> np.ndarray:
    if offset < 0 or offset + size > payload.size:
        raise CheckpointError(f"checkpoint {path}: {what} lies outside the payload")
    return payload[offset : offset + size]


def load_checkpoint(path: str | Path) -> Model:
    """Rebuild a model from a checkpoint file; parameters widen to float64."""
    ckpt = read_checkpoint(path)
    groups = {name: ParamGroup(name) for name in ("theta", "phi", "w")}
    for entry in ckpt.params:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        flat = _slice(ckpt.payload, entry["offset"], size, f"parameter {entry['name']}", path)
        if entry["group"] not in groups:
            raise CheckpointError(f"checkpoint {path} names unknown group {entry['group']!r}")
        groups[entry["group"]].add(
            entry["name"],
            Tensor(flat.astype(np.float64).reshape(shape), requires_grad=True),
        )
    bn_states = []
    for entry in ckpt.bn:
        c = int(entry["channels"])
        mean = _slice(ckpt.payload, entry["mean_offset"], c, "bn mean", path)
        var = _slice(ckpt.payload, entry["var_offset"], c, "bn var", path)
        bn_states.append(
            BatchNormState(
                running_mean=mean.astype(np.float64),
                running_var=var.astype(np.float64),
                momentum=float(entry["momentum"]),
                eps=float(entry["eps"]),
            )
        )
    return Model(
        config=ckpt.config,
        theta=groups["theta"],
        phi=groups["phi"],
        w=groups["w"],
        bn_states=bn_states,
    )
