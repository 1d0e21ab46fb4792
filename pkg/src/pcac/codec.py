"""The attention autoencoder: geometry pyramid, down/up blocks, encode/decode."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import Eca
from .pointcloud import PATCH_SIZE, Patch
from .sampling import fps, knn, nearest


@dataclass(frozen=True)
class CodecConfig:
    num_scales: int = 2
    sample_ratio: int = 4
    eca_layers_per_block: int = 2
    channels: int = 256
    k_neighbors: int = 16
    latent_channels: int = 16
    alphabet: int = 127
    residual: bool = True  # skip connection around every ECA layer

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "residual" and int(value) < 1:
                raise ValueError(f"CodecConfig.{name} must be >= 1, got {value}")
        if PATCH_SIZE % (self.sample_ratio ** self.num_scales):
            raise ValueError(
                f"patch size {PATCH_SIZE} is not divisible by "
                f"sample_ratio**num_scales = {self.sample_ratio ** self.num_scales}"
            )
        finest_eca = PATCH_SIZE // self.sample_ratio ** (self.num_scales - 1)
        if finest_eca < self.k_neighbors:
            raise ValueError(
                f"k_neighbors={self.k_neighbors} exceeds the {finest_eca} points of the coarsest ECA scale"
            )

    @property
    def scale_sizes(self) -> list[int]:
        return [PATCH_SIZE // self.sample_ratio ** s for s in range(self.num_scales + 1)]

    @property
    def latent_rows(self) -> int:
        return self.scale_sizes[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**{k: bool(v) if k == "residual" else int(v) for k, v in d.items()})

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class ScalePyramid:
    positions: list  # [N_s, 3] float64 arrays, s = 0..S
    selections: list  # rows of positions[s] that make up positions[s + 1]


@dataclass
class PatchGeometry:
    """Everything the network needs from a patch's coordinates, precomputed once."""

    pyramid: ScalePyramid
    neighbors: list = field(default_factory=list)  # Neighborhood per ECA scale 0..S-1


def build_pyramid(positions, cfg: CodecConfig) -> ScalePyramid:
    p = np.asarray(positions, dtype=np.float64)
    if len(p) != PATCH_SIZE:
        raise ValueError(f"pyramid input must have {PATCH_SIZE} rows, got {len(p)}")
    levels, sels = [p], []
    for _ in range(cfg.num_scales):
        cur = levels[-1]
        if len(cur) % cfg.sample_ratio:
            raise ValueError(f"{len(cur)} points not divisible by ratio {cfg.sample_ratio}")
        sel = fps(cur, len(cur) // cfg.sample_ratio)
        sels.append(sel)
        levels.append(cur[sel])
    return ScalePyramid(levels, sels)


def patch_geometry(positions, cfg: CodecConfig) -> PatchGeometry:
    pyr = build_pyramid(positions, cfg)
    nbrs = [knn(p, p, cfg.k_neighbors) for p in pyr.positions[:-1]]
    return PatchGeometry(pyr, nbrs)


@dataclass
class GeometryBatch:
    """Stacked torch view of several PatchGeometry objects."""

    indices: list  # per scale [B, N_s, K] long
    rel_pos: list  # per scale [B, N_s, K, 3]
    selections: list  # per scale transition [B, N_{s+1}] long

    @classmethod
    def stack(cls, geoms, dtype=torch.float32) -> "GeometryBatch":
        s_count = len(geoms[0].neighbors)
        idx = [torch.from_numpy(np.stack([g.neighbors[s].indices for g in geoms])) for s in range(s_count)]
        rel = [
            torch.from_numpy(np.stack([g.neighbors[s].rel_pos for g in geoms])).to(dtype)
            for s in range(s_count)
        ]
        sel = [torch.from_numpy(np.stack([g.pyramid.selections[s] for g in geoms])) for s in range(s_count)]
        return cls(idx, rel, sel)


def select_rows(features: torch.Tensor, sel: torch.Tensor) -> torch.Tensor:
    """Batched ``features[b, sel[b]]``."""
    return torch.gather(features, 1, sel[..., None].expand(-1, -1, features.shape[-1]))


def zero_pad(coarse: torch.Tensor, sel: torch.Tensor, n_dense: int) -> torch.Tensor:
    """Place coarse features at their dense-scale rows; every other row is zero.

    Coarse row ``i`` is dense row ``sel[i]`` by construction of the pyramid, so
    the coincidence test is an index identity rather than a float compare.
    """
    b, _, c = coarse.shape
    padded = coarse.new_zeros(b, n_dense, c)
    return padded.scatter(1, sel[..., None].expand(-1, -1, c), coarse)


def zero_pad_by_nearest(coarse_pos, coarse_feat, dense_pos) -> np.ndarray:
    """Reference zero-padding via nearest-neighbor search and exact distance test."""
    dense_pos = np.asarray(dense_pos, dtype=np.float64)
    coarse_pos = np.asarray(coarse_pos, dtype=np.float64)
    coarse_feat = np.asarray(coarse_feat)
    j = nearest(dense_pos, coarse_pos)
    hit = ((dense_pos - coarse_pos[j]) ** 2).sum(axis=1) == 0
    out = np.zeros((len(dense_pos), coarse_feat.shape[1]), dtype=coarse_feat.dtype)
    out[hit] = coarse_feat[j[hit]]
    return out


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        c, layers = cfg.channels, cfg.eca_layers_per_block
        self.lift = nn.Linear(3, c)
        self.down = nn.ModuleList(
            nn.ModuleList(Eca(c, c) for _ in range(layers)) for _ in range(cfg.num_scales)
        )
        self.to_latent = nn.Linear(c, cfg.latent_channels)
        self.from_latent = nn.Linear(cfg.latent_channels, c)
        self.up = nn.ModuleList(
            nn.ModuleList(Eca(c, c) for _ in range(layers)) for _ in range(cfg.num_scales)
        )
        self.head = nn.Linear(c, 3)

    def _stack(self, layers, f, idx, rel):
        for layer in layers:
            out = layer.forward_indexed(f, idx, rel)
            f = f + out if self.cfg.residual else out
        return f

    def down_block(self, s: int, f: torch.Tensor, geom: GeometryBatch) -> torch.Tensor:
        f = self._stack(self.down[s], f, geom.indices[s], geom.rel_pos[s])
        return select_rows(f, geom.selections[s])

    def up_block(self, s: int, f: torch.Tensor, geom: GeometryBatch, trace=None) -> torch.Tensor:
        """Upsample from scale ``s + 1`` to scale ``s``."""
        n_dense = geom.indices[s].shape[1]
        padded = zero_pad(f, geom.selections[s], n_dense)
        if trace is not None:
            trace.append((f, padded, geom.selections[s]))
        block = self.up[self.cfg.num_scales - 1 - s]
        return self._stack(block, padded, geom.indices[s], geom.rel_pos[s])

    def encode(self, colors: torch.Tensor, geom: GeometryBatch) -> torch.Tensor:
        f = self.lift(colors)
        for s in range(self.cfg.num_scales):
            f = self.down_block(s, f, geom)
        return self.to_latent(f)

    def decode(self, latent: torch.Tensor, geom: GeometryBatch, trace=None) -> torch.Tensor:
        f = self.from_latent(latent)
        for s in reversed(range(self.cfg.num_scales)):
            f = self.up_block(s, f, geom, trace)
        return self.head(f)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_init(cfg: CodecConfig, seed: int) -> Codec:
    """Build a codec with uniform fan-in scaled weights drawn from ``seed``."""
    model = Codec(cfg)
    rng = np.random.default_rng(seed)
    modules = dict(model.named_modules())
    with torch.no_grad():
        for name, p in model.named_parameters():
            owner = modules[name.rsplit(".", 1)[0]]
            bound = 1.0 / math.sqrt(owner.weight.shape[1])
            p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))
    return model


# Single-patch convenience surface -------------------------------------------


def encode(patch: Patch, model: Codec, geometry: PatchGeometry | None = None) -> torch.Tensor:
    """Continuous latent [M, latent_channels] of one patch."""
    geometry = geometry or patch_geometry(patch.positions, model.cfg)
    dtype = next(model.parameters()).dtype
    geom = GeometryBatch.stack([geometry], dtype)
    colors = torch.as_tensor(patch.colors, dtype=dtype)[None]
    with torch.no_grad():
        return model.encode(colors, geom)[0]


def decode(latent_hat, pyramid_or_geometry, model: Codec, clip: bool = True) -> np.ndarray:
    """Colors [2048, 3] from an integer latent and the patch geometry."""
    cfg = model.cfg
    geometry = pyramid_or_geometry
    if isinstance(geometry, ScalePyramid):
        pyr = geometry
        geometry = PatchGeometry(pyr, [knn(p, p, cfg.k_neighbors) for p in pyr.positions[:-1]])
    dtype = next(model.parameters()).dtype
    latent = torch.as_tensor(np.asarray(latent_hat), dtype=dtype)
    if latent.shape != (cfg.latent_rows, cfg.latent_channels):
        raise ValueError(
            f"latent shape {tuple(latent.shape)} does not match pyramid ({cfg.latent_rows}, {cfg.latent_channels})"
        )
    geom = GeometryBatch.stack([geometry], dtype)
    with torch.no_grad():
        out = model.decode(latent[None], geom)[0].double().numpy()
    return np.clip(out, 0.0, 1.0) if clip else out
