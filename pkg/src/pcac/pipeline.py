"""Whole-cloud compression: patching, coding, container packing and back."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .bitstream import PatchRecord, StreamInfo, pack_bitstream, unpack_bitstream
from .checkpoint import model_hash
from .codec import Codec, decode, encode, patch_geometry
from .entropy import EntropyModel, quantize
from .pointcloud import PointCloud, make_patches, merge_patches
from .rangecoder import BitstreamError, CodingTables, ac_decode, ac_encode, coding_tables


class StreamMismatch(ValueError):
    pass


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def compress_patch(patch, codec: Codec, tables: CodingTables) -> PatchRecord:
    geom = patch_geometry(patch.positions, codec.cfg)
    latent = quantize(encode(patch, codec, geom), "eval").numpy().astype(np.int64)
    payload = ac_encode(latent, tables)
    return PatchRecord(int(patch.owned.sum()), latent.shape[0], latent.shape[1], payload)


def decompress_patch(record: PatchRecord, patch, codec: Codec, tables: CodingTables) -> np.ndarray:
    cfg = codec.cfg
    if (record.latent_rows, record.latent_channels) != (cfg.latent_rows, cfg.latent_channels):
        raise StreamMismatch("model/stream mismatch: latent shape differs from the model")
    symbols = ac_decode(record.payload, record.latent_rows * record.latent_channels, tables)
    latent = symbols.reshape(record.latent_rows, record.latent_channels)
    return decode(latent, patch_geometry(patch.positions, cfg), codec)


def compress_cloud(pc: PointCloud, codec: Codec, em: EntropyModel, seed: int = 0, jobs: int = 1) -> bytes:
    tables = coding_tables(em, codec.cfg.alphabet)
    patches = make_patches(pc, seed=seed)
    records = _map(lambda p: compress_patch(p, codec, tables), patches, jobs)
    return pack_bitstream(StreamInfo(model_hash(codec, em), seed, len(pc), records))


def decompress_cloud(data: bytes, positions, codec: Codec, em: EntropyModel, jobs: int = 1) -> PointCloud:
    """Rebuild the colors of ``positions`` from a stream; returns a YUV-tagged cloud."""
    info = unpack_bitstream(data)
    if info.model_hash != model_hash(codec, em):
        raise StreamMismatch("model/stream mismatch: stream was produced by a different model")
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) != info.n_points:
        raise StreamMismatch(
            f"geometry has {len(positions)} points but the stream describes {info.n_points}"
        )
    shell = PointCloud(positions, np.zeros_like(positions), "YUV")
    patches = make_patches(shell, seed=info.seed)
    if len(patches) != len(info.patches):
        raise StreamMismatch("geometry does not match the stream's patch table")
    for p, rec in zip(patches, info.patches):
        if int(p.owned.sum()) != rec.points:
            raise StreamMismatch("geometry does not match the stream's patch table")
    tables = coding_tables(em, codec.cfg.alphabet)
    colors = _map(lambda pr: decompress_patch(pr[1], pr[0], codec, tables), list(zip(patches, info.patches)), jobs)
    return PointCloud(positions, merge_patches(patches, colors, len(positions)), "YUV")


__all__ = [
    "BitstreamError",
    "StreamMismatch",
    "compress_cloud",
    "compress_patch",
    "decompress_cloud",
    "decompress_patch",
]
