"""Internal self-attention, position embeddings and external cross attention.

All tensors carry arbitrary leading batch dims. Neighborhood tensors are laid
out ``[..., N, K, C]``: N centre points, K neighbors each.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .sampling import knn


def gather_rows(features: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """``out[..., i, j, :] = features[..., indices[..., i, j], :]``."""
    if features.dim() == 2:
        return features[indices]
    lead = features.shape[:-2]
    b = math.prod(lead)
    f = features.reshape(b, *features.shape[-2:])
    idx = indices.reshape(b, *indices.shape[-2:])
    batch = torch.arange(b, device=f.device)[:, None, None]
    return f[batch, idx].reshape(*lead, *indices.shape[-2:], features.shape[-1])


class Isa(nn.Module):
    """Scaled dot-product self-attention among the K relative positions of a point."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.w_q = nn.Linear(3, d)
        self.w_k = nn.Linear(3, d)
        self.w_v = nn.Linear(3, d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.w_q(x), self.w_k(x), self.w_v(x)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d)
        return torch.softmax(scores, dim=-1) @ v


def _mlp(d: int, c: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, c))


class PosEmbed(nn.Module):
    def __init__(self, d: int, c: int):
        super().__init__()
        self.isa_pem = Isa(d)
        self.isa_peb = Isa(d)
        self.mlp_pem = _mlp(d, c)
        self.mlp_peb = _mlp(d, c)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.mlp_pem(self.isa_pem(x)), self.mlp_peb(self.isa_peb(x))


class Eca(nn.Module):
    """Vector cross attention between neighbor colors and relative geometry.

    Scores are normalized over the neighbor axis separately for each channel.
    """

    def __init__(self, c_in: int, c: int, d: int | None = None):
        super().__init__()
        d = c if d is None else d
        self.psi_q = nn.Linear(3, c)
        self.psi_k = nn.Linear(c_in, c)
        self.psi_v = nn.Linear(c_in, c, bias=False)
        self.pos = PosEmbed(d, c)
        self.out = nn.Linear(c, c, bias=False)

    def attend(self, keys, values, x):
        """Core of the layer on already projected neighbor keys/values [..., N, K, C]."""
        pem, peb = self.pos(x)
        scores = torch.softmax((keys - self.psi_q(x)) * pem + peb, dim=-2)
        return self.out(((values + peb) * scores).sum(dim=-2))

    def forward(self, f_nbr: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.attend(self.psi_k(f_nbr), self.psi_v(f_nbr), x)

    def forward_indexed(self, f: torch.Tensor, indices: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        # Projecting before the gather is cheaper and gives the same rows.
        keys = gather_rows(self.psi_k(f), indices)
        values = gather_rows(self.psi_v(f), indices)
        return self.attend(keys, values, x)


# Functional surface ---------------------------------------------------------


def isa_forward(x: torch.Tensor, params: Isa) -> torch.Tensor:
    return params(x)


def position_embed(x: torch.Tensor, params: PosEmbed) -> tuple[torch.Tensor, torch.Tensor]:
    return params(x)


def eca_forward(f_nbr: torch.Tensor, x: torch.Tensor, params: Eca) -> torch.Tensor:
    return params(f_nbr, x)


def eca_layer(positions, features: torch.Tensor, k: int, params: Eca) -> torch.Tensor:
    """Run one ECA layer on a single point set, building its KNN table on the fly."""
    p = positions.detach().cpu().double().numpy() if torch.is_tensor(positions) else positions
    if len(p) < k:
        raise ValueError(f"eca_layer needs at least k={k} points, got {len(p)}")
    nbh = knn(p, p, k)
    idx = torch.from_numpy(nbh.indices)
    x = torch.from_numpy(nbh.rel_pos).to(features.dtype)
    return params.forward_indexed(features, idx, x)
