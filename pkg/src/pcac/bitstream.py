"""Container format for compressed clouds.

Layout (little-endian)::

    4s   magic "A2CP"
    u8   version
    8s   model hash (config + parameters)
    u32  patching seed
    u32  number of points in the cloud
    u32  patch count P
    P x (u32 owned points, u16 latent rows, u16 latent channels, u32 payload bytes)
    payloads, concatenated in patch order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .rangecoder import BitstreamError

MAGIC = b"A2CP"
VERSION = 1
_HEAD = struct.Struct("<4sB8sIII")
_PATCH = struct.Struct("<IHHI")


@dataclass
class PatchRecord:
    points: int
    latent_rows: int
    latent_channels: int
    payload: bytes


@dataclass
class StreamInfo:
    model_hash: bytes
    seed: int
    n_points: int
    patches: list = field(default_factory=list)


def header_size(patch_count: int) -> int:
    return _HEAD.size + patch_count * _PATCH.size


def pack_bitstream(info: StreamInfo) -> bytes:
    if len(info.model_hash) != 8:
        raise ValueError("model hash must be 8 bytes")
    parts = [_HEAD.pack(MAGIC, VERSION, info.model_hash, info.seed, info.n_points, len(info.patches))]
    for p in info.patches:
        parts.append(_PATCH.pack(p.points, p.latent_rows, p.latent_channels, len(p.payload)))
    parts.extend(p.payload for p in info.patches)
    return b"".join(parts)


def unpack_bitstream(data: bytes) -> StreamInfo:
    if len(data) < _HEAD.size:
        raise BitstreamError(f"truncated header: {len(data)} bytes")
    magic, version, mhash, seed, n_points, count = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if len(data) < header_size(count):
        raise BitstreamError(f"truncated patch table: {count} patches declared")
    records = [_PATCH.unpack_from(data, _HEAD.size + i * _PATCH.size) for i in range(count)]
    pos = header_size(count)
    patches = []
    for points, rows, chans, length in records:
        if pos + length > len(data):
            raise BitstreamError("truncated payload")
        patches.append(PatchRecord(points, rows, chans, bytes(data[pos:pos + length])))
        pos += length
    if pos != len(data):
        raise BitstreamError(f"{len(data) - pos} trailing bytes after last payload")
    return StreamInfo(mhash, seed, n_points, patches)
