"""Procedural training data, the rate-distortion loss and the optimization loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .codec import Codec, GeometryBatch, patch_geometry
from .entropy import EntropyModel, quantize, rate_estimate
from .pointcloud import PATCH_SIZE, Patch, rgb_to_yuv

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float
    steps: int
    lr: float = 5e-4
    batch: int = 8
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthetic data


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _torus(rng, n):
    big, small = 1.0, rng.uniform(0.2, 0.5)
    # area-uniform sampling by rejection on the tube angle
    u = rng.uniform(0, 2 * np.pi, 4 * n)
    v = rng.uniform(0, 2 * np.pi, 4 * n)
    keep = rng.uniform(0, 1, 4 * n) < (big + small * np.cos(v)) / (big + small)
    u, v = u[keep][:n], v[keep][:n]
    r = big + small * np.cos(v)
    return np.stack([r * np.cos(u), r * np.sin(u), small * np.sin(v)], axis=1)


def _superquadric(rng, n):
    e1, e2 = rng.uniform(0.3, 2.0, 2)
    axes = rng.uniform(0.5, 1.0, 3)
    d = _sphere(rng, n)

    def spow(x, e):
        return np.sign(x) * np.abs(x) ** e

    return np.stack([axes[0] * spow(d[:, 0], e1), axes[1] * spow(d[:, 1], e2), axes[2] * spow(d[:, 2], e1)], axis=1)


def _plane(rng, n):
    xy = rng.uniform(-1, 1, size=(n, 2))
    f = rng.uniform(0.5, 2.0, 2)
    z = 0.15 * np.sin(f[0] * np.pi * xy[:, 0]) * np.cos(f[1] * np.pi * xy[:, 1])
    z += rng.normal(scale=0.01, size=n)
    return np.column_stack([xy, z])


_SHAPES = (_sphere, _torus, _superquadric, _plane)


def _value_noise(rng, uv, octaves=4, base_freq=2.0):
    """Multi-octave lattice value noise on 2-D coordinates, roughly in [0, 1]."""
    total, amp, norm = np.zeros(len(uv)), 1.0, 0.0
    for o in range(octaves):
        freq = base_freq * 2 ** o
        size = int(math.ceil(freq * 3)) + 2
        lattice = rng.uniform(0, 1, (size, size))
        p = (uv + 1.5) * freq
        i = np.floor(p).astype(int) % (size - 1)
        t = p - np.floor(p)
        t = t * t * (3 - 2 * t)
        a = lattice[i[:, 0], i[:, 1]]
        b = lattice[i[:, 0] + 1, i[:, 1]]
        c = lattice[i[:, 0], i[:, 1] + 1]
        d = lattice[i[:, 0] + 1, i[:, 1] + 1]
        top = a + (b - a) * t[:, 0]
        bottom = c + (d - c) * t[:, 0]
        total += amp * (top + (bottom - top) * t[:, 1])
        norm += amp
        amp *= 0.5
    return total / norm


def _texture(rng, pos):
    basis, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    uv = pos @ basis[:, :2]
    palette = rng.uniform(0, 1, (3, 3))
    kind = rng.integers(3)
    if kind == 0:
        t = _value_noise(rng, uv, base_freq=rng.uniform(1.0, 3.0))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        rgb = np.where(t[:, None] < 0.5, palette[0] + (palette[1] - palette[0]) * (2 * t[:, None]),
                       palette[1] + (palette[2] - palette[1]) * (2 * t[:, None] - 1))
    elif kind == 1:
        direction = basis[:, 2]
        t = pos @ direction
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        rgb = palette[0] + (palette[1] - palette[0]) * t[:, None]
        rgb += 0.15 * (_value_noise(rng, uv, octaves=3, base_freq=4.0)[:, None] - 0.5)
    else:
        freq = rng.uniform(2.0, 6.0)
        s = 0.5 + 0.5 * np.tanh(4 * np.sin(freq * np.pi * uv[:, 0] + rng.uniform(0, 2 * np.pi)))
        rgb = palette[0] + (palette[1] - palette[0]) * s[:, None]
        rgb += 0.2 * (_value_noise(rng, uv, octaves=3)[:, None] - 0.5) * palette[2]
    return np.clip(rgb, 0.0, 1.0)


def synth_patch(rng: np.random.Generator) -> Patch:
    shape = _SHAPES[rng.integers(len(_SHAPES))]
    pos = shape(rng, PATCH_SIZE)
    if len(pos) < PATCH_SIZE:  # torus rejection came up short
        pos = np.concatenate([pos, shape(rng, PATCH_SIZE)])[:PATCH_SIZE]
    rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    pos = pos @ rot.T
    centroid = pos.mean(axis=0)
    pos = pos - centroid
    scale = float(np.linalg.norm(pos, axis=1).max())
    pos = pos / scale
    colors = rgb_to_yuv(_texture(rng, pos))
    return Patch(pos, colors, np.arange(PATCH_SIZE), centroid, scale)


def synth_dataset(n_patches: int, seed: int) -> list[Patch]:
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    rng = np.random.default_rng(seed)
    return [synth_patch(rng) for _ in range(n_patches)]


# ---------------------------------------------------------------------------
# loss and loop


def rd_loss(pred, target, rate_bits, lam):
    """Squared color error summed over points and channels plus ``lam`` times the rate.

    ``rate_bits`` is the estimated code length of the patch's latent in bits.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum() + lam * rate_bits


class GeometryCache:
    """Lazily computed PatchGeometry per dataset index."""

    def __init__(self, patches, cfg):
        self.patches, self.cfg = patches, cfg
        self._geoms = {}

    def __getitem__(self, i):
        if i not in self._geoms:
            g = patch_geometry(self.patches[i].positions, self.cfg)
            for nb in g.neighbors:
                nb.rel_pos = nb.rel_pos.astype(np.float32)
            self._geoms[i] = g
        return self._geoms[i]


def train(model: Codec, em: EntropyModel, dataset, cfg: TrainConfig, geometry: GeometryCache | None = None,
          progress=None):
    """Jointly optimize codec and entropy model with Adam; returns (model, em, log rows)."""
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    geometry = geometry or GeometryCache(dataset, model.cfg)
    params = list(model.parameters()) + list(em.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999))
    colors = [torch.as_tensor(p.colors, dtype=torch.float32) for p in dataset]

    order, cursor = rng.permutation(len(dataset)), 0
    log = []
    model.train()
    for step in range(1, cfg.steps + 1):
        batch = []
        while len(batch) < cfg.batch:
            if cursor == len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            batch.append(int(order[cursor]))
            cursor += 1
        geom = GeometryBatch.stack([geometry[i] for i in batch])
        target = torch.stack([colors[i] for i in batch])

        latent = model.encode(target, geom)
        noisy = quantize(latent, "train", noise_gen)
        pred = model.decode(noisy, geom)
        total_bits = rate_estimate(noisy, em)
        loss = rd_loss(pred, target, total_bits, cfg.lam) / len(batch)
        bits = total_bits.detach() / len(batch)
        dist = ((pred.detach() - target) ** 2).sum() / len(batch)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"loss became {loss.item()} at step {step} (distortion {dist.item()}, bits {bits.item()})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.log_every == 0 or step == cfg.steps:
            row = {
                "step": step,
                "loss": loss.item(),
                "distortion": dist.item(),
                "est_bpp": bits.item() / PATCH_SIZE,
            }
            log.append(row)
            if progress is not None:
                progress(row)
    model.eval()
    return model, em, log


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "distortion", "est_bpp"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})
