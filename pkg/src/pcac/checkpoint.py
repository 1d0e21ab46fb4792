"""Self-describing model files.

Layout::

    4s   magic "A2CM"
    u8   format version
    u32  LE length of the JSON index
    JSON {"config": {...}, "tensors": [{"name", "shape", "offset"}], "meta": {...}}
    raw float32 little-endian tensor data, offsets relative to the data start
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .codec import Codec, CodecConfig
from .entropy import EntropyModel

MAGIC = b"A2CM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_tensors(codec: Codec, em: EntropyModel):
    for prefix, module in (("codec", codec), ("entropy", em)):
        for name, t in module.state_dict().items():
            yield f"{prefix}.{name}", t.detach().cpu().numpy().astype("<f4")


def model_hash(codec: Codec, em: EntropyModel) -> bytes:
    """8-byte fingerprint of the configuration and every parameter value."""
    h = hashlib.sha256(codec.cfg.to_json().encode())
    for name, arr in _named_tensors(codec, em):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.digest()[:8]


def save_checkpoint(path, codec: Codec, em: EntropyModel, meta: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in _named_tensors(codec, em):
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(
        {"config": json.loads(codec.cfg.to_json()), "tensors": index, "meta": meta or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<BI", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(codec, entropy_model, meta)``; raises CheckpointError on a bad file."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read model file {path}: {exc}") from exc
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a model file (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported model format version {version}")
    try:
        head = json.loads(data[9:9 + hlen].decode())
        cfg = CodecConfig.from_dict(head["config"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt model file {path}: {exc}") from exc
    base = 9 + hlen
    codec, em = Codec(cfg), EntropyModel(cfg.latent_channels)
    states = {"codec": codec.state_dict(), "entropy": em.state_dict()}
    seen = set()
    for entry in head["tensors"]:
        prefix, name = entry["name"].split(".", 1)
        target = states.get(prefix, {}).get(name)
        shape = tuple(entry["shape"])
        if target is None or tuple(target.shape) != shape:
            raise CheckpointError(f"corrupt model file {path}: unexpected tensor {entry['name']} {shape}")
        count = int(np.prod(shape))
        start = base + entry["offset"]
        if start + 4 * count > len(data):
            raise CheckpointError(f"corrupt model file {path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape)
        target.copy_(torch.from_numpy(arr.copy()))
        seen.add(entry["name"])
    expected = {f"{p}.{n}" for p, s in states.items() for n in s}
    if seen != expected:
        raise CheckpointError(f"corrupt model file {path}: missing tensors {sorted(expected - seen)[:3]}")
    codec.load_state_dict(states["codec"])
    em.load_state_dict(states["entropy"])
    codec.eval()
    return codec, em, head.get("meta", {})
