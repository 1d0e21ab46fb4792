"""Quantization, the factorized entropy model and rate estimation."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LIKELIHOOD_FLOOR = 1e-9


def round_half_away(x):
    if torch.is_tensor(x):
        return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(f, mode: str = "eval", rng=None):
    """Additive uniform noise in training, rounding at evaluation.

    ``rng`` is a ``torch.Generator`` for tensors or a numpy ``Generator`` for
    arrays; it is only consulted in training mode.
    """
    if mode == "eval":
        return round_half_away(f)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if torch.is_tensor(f):
        noise = torch.rand(f.shape, generator=rng, dtype=f.dtype, device=f.device) - 0.5
        return f + noise
    rng = rng if rng is not None else np.random.default_rng()
    f = np.asarray(f, dtype=np.float64)
    return f + rng.uniform(-0.5, 0.5, size=f.shape)


class EntropyModel(nn.Module):
    """Per-channel learned CDF built from monotone affine/tanh stages.

    Each channel maps a scalar through widths 1-3-3-1. Stage weights go
    through softplus so they stay positive, and the gating factors are squashed
    by tanh, so every stage is strictly increasing.
    """

    def __init__(self, channels: int, filters=(3, 3), init_scale: float = 10.0, seed: int = 0):
        super().__init__()
        self.channels = channels
        widths = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(widths) - 1))
        rng = np.random.default_rng(seed)
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(widths) - 1):
            init = np.log(np.expm1(1.0 / scale / widths[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, widths[i + 1], widths[i]), float(init))))
            self.biases.append(
                nn.Parameter(torch.from_numpy(rng.uniform(-0.5, 0.5, (channels, widths[i + 1], 1))).float())
            )
            if i < len(widths) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, widths[i + 1], 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, n] -> cumulative logits [C, n]
        h = x[:, None, :]
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = F.softplus(m) @ h + b
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h[:, 0, :]

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """CDF values for ``x`` laid out [..., C]."""
        flat = x.reshape(-1, self.channels).t()
        return torch.sigmoid(self._logits(flat)).t().reshape(x.shape)

    def likelihood(self, x: torch.Tensor) -> torch.Tensor:
        """Mass of the unit bin centred on each value, ``x`` laid out [..., C]."""
        flat = x.reshape(-1, self.channels).t()
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        # evaluate on the side of the sigmoid with more precision
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return lik.t().reshape(x.shape)

    def pmf_table(self, alphabet: int) -> np.ndarray:
        """float64 symbol probabilities [C, 2A+1] for integers -A..A."""
        n = torch.arange(-alphabet, alphabet + 1, dtype=torch.float64)
        with torch.no_grad():
            m = self.double_copy()
            grid = n[:, None].expand(-1, self.channels)
            return m.likelihood(grid).t().numpy().copy()

    def double_copy(self) -> "EntropyModel":
        twin = EntropyModel(self.channels, filters=tuple(m.shape[1] for m in self.matrices[:-1]))
        twin.load_state_dict(self.state_dict())
        return twin.double()


def rate_estimate(f_hat: torch.Tensor, em: EntropyModel) -> torch.Tensor:
    """Estimated code length in bits of ``f_hat`` ([..., C]) under ``em``."""
    lik = em.likelihood(f_hat).clamp_min(LIKELIHOOD_FLOOR)
    return -torch.log2(lik).sum()
