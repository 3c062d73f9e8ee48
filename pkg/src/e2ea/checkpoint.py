"""Binary tensor container used for checkpoints and on-disk datasets.

Layout (all integers little-endian)::

    b"E2EA"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
              u8 dtype (0 = f64 LE), raw data }
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"E2EA"
VERSION = 1
DTYPE_F64 = 0
META_PREFIX = "__meta__/"
CONFIG_KEY = "__config__"


class CheckpointError(IOError):
    """Malformed container; ``field`` names the part that failed."""

    def __init__(self, field: str, message: str):
        super().__init__(f"checkpoint {field} error: {message}")
        self.field = field


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, float] = field(default_factory=dict)
    config_text: str = ""


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8")  # tobytes() emits C order; keeps rank 0
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < 16:
        raise CheckpointError("crc", "file too short")
    if blob[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, got {blob[:4]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("crc", "CRC32 mismatch (truncated or corrupted file)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version}, expected {VERSION}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            (dtype,) = struct.unpack_from("<B", body, pos)
            pos += 1
            if dtype != DTYPE_F64:
                raise CheckpointError("dtype", f"tensor {name!r} has unknown dtype tag {dtype}")
            size = int(np.prod(dims, dtype=np.int64)) * 8
            if pos + size > len(body):
                raise CheckpointError("data", f"tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError("data", str(exc)) from None
    if pos != len(body):
        raise CheckpointError("data", f"{len(body) - pos} trailing bytes")
    return out


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    tensors = dict(ckpt.tensors)
    for k, v in ckpt.meta.items():
        tensors[META_PREFIX + k] = np.array(float(v))
    if ckpt.config_text:
        tensors[META_PREFIX + CONFIG_KEY] = np.frombuffer(ckpt.config_text.encode("utf-8"), dtype=np.uint8).astype(np.float64)
    Path(path).write_bytes(encode_tensors(tensors))


def checkpoint_load(path) -> Checkpoint:
    tensors = decode_tensors(Path(path).read_bytes())
    ckpt = Checkpoint()
    for name, value in tensors.items():
        if name == META_PREFIX + CONFIG_KEY:
            ckpt.config_text = value.astype(np.uint8).tobytes().decode("utf-8")
        elif name.startswith(META_PREFIX):
            ckpt.meta[name[len(META_PREFIX):]] = float(value)
        else:
            ckpt.tensors[name] = value
    return ckpt


def save_dataset(path, utterances) -> None:
    """Write utterances as ``<uid>/features`` (T x D) and ``<uid>/labels`` tensors."""
    tensors = {}
    for u in utterances:
        if "/" in u.uid:
            raise ValueError(f"utterance id {u.uid!r} may not contain '/'")
        tensors[f"{u.uid}/features"] = u.features.frames
        tensors[f"{u.uid}/labels"] = np.asarray(u.labels, dtype=np.float64)
    Path(path).write_bytes(encode_tensors(tensors))


def load_dataset(path):
    from .encoder import FeatureSequence
    from .train import Utterance

    tensors = decode_tensors(Path(path).read_bytes())
    out = []
    for name, value in tensors.items():
        uid, _, kind = name.rpartition("/")
        if kind != "features":
            continue
        labels = tensors.get(f"{uid}/labels")
        if labels is None or value.ndim != 2:
            raise CheckpointError("data", f"utterance {uid!r} is incomplete")
        out.append(Utterance(uid, FeatureSequence(value), tuple(int(c) for c in labels)))
    return out
