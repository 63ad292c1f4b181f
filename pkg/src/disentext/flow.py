"""Affine coupling stack mapping the sentence latent z_s to the feature latent z_f.

Each layer copies the conditioning block unchanged and applies
``out = in * exp(s) + m`` to the remaining block, with ``(m, s)`` computed
from the conditioning block. ``logdet`` is always reported for the
z_s -> z_f direction, so the density of z_s induced by a standard-normal
z_f is ``log N(z_f) + logdet``.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .distributions import standard_normal_log_prob
from .errors import DomainError, NumericError, SingularLayerError

RAW_SCALE_MIN, RAW_SCALE_MAX = -8.0, 8.0
MIN_SCALE = 1e-12


def default_split(dim: int) -> int:
    return math.ceil(dim / 2)


class CouplingLayer(nn.Module):
    """One coupling step. With ``flip`` the roles of the two blocks swap."""

    def __init__(self, dim: int, split: int, hidden: int = 32, index: int = 0,
                 flip: bool = False, zero_init: bool = True):
        super().__init__()
        if not 1 <= split < dim:
            raise DomainError(f"split index must satisfy 1 <= k < d, got k={split}, d={dim}")
        self.dim, self.split, self.index, self.flip = dim, split, index, flip
        cond = torch.arange(split) if not flip else torch.arange(split, dim)
        trans = torch.arange(split, dim) if not flip else torch.arange(split)
        self.register_buffer("cond_idx", cond, persistent=False)
        self.register_buffer("trans_idx", trans, persistent=False)
        n_out = len(trans)
        self.conditioner = nn.Sequential(
            nn.Linear(len(cond), hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, 2 * n_out),
        )
        if zero_init:
            nn.init.zeros_(self.conditioner[-1].weight)
            nn.init.zeros_(self.conditioner[-1].bias)

    def shift_and_log_scale(self, cond: torch.Tensor):
        shift, raw = self.conditioner(cond).chunk(2, dim=-1)
        if not torch.isfinite(raw).all() or not torch.isfinite(shift).all():
            raise NumericError(f"non-finite scale in coupling layer {self.index}", where=f"layer {self.index}")
        return shift, raw.clamp(RAW_SCALE_MIN, RAW_SCALE_MAX)

    def forward(self, z: torch.Tensor):
        cond = z[..., self.cond_idx]
        shift, log_scale = self.shift_and_log_scale(cond)
        out = z.clone()
        out[..., self.trans_idx] = z[..., self.trans_idx] * log_scale.exp() + shift
        return out, log_scale.sum(-1)

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        cond = y[..., self.cond_idx]
        shift, log_scale = self.shift_and_log_scale(cond)
        scale = log_scale.exp()
        if (scale < MIN_SCALE).any():
            raise SingularLayerError(f"coupling layer {self.index} has scale below {MIN_SCALE}",
                                     where=f"layer {self.index}")
        z = y.clone()
        z[..., self.trans_idx] = (y[..., self.trans_idx] - shift) / scale
        return z


class CouplingFlowStack(nn.Module):
    """T coupling layers; all share the split index unless ``alternate`` is set."""

    def __init__(self, dim: int, num_layers: int = 3, split: int | None = None, hidden: int = 32,
                 alternate: bool = False, zero_init: bool = True):
        super().__init__()
        if num_layers < 1:
            raise DomainError("flow needs at least one layer")
        split = default_split(dim) if not split else split
        self.dim, self.split, self.alternate = dim, split, alternate
        self.layers = nn.ModuleList(
            CouplingLayer(dim, split, hidden, index=t, flip=alternate and t % 2 == 1, zero_init=zero_init)
            for t in range(num_layers)
        )

    def forward(self, z_s: torch.Tensor):
        if not torch.isfinite(z_s).all():
            raise NumericError("non-finite flow input")
        z, logdet = z_s, z_s.new_zeros(z_s.shape[:-1])
        for layer in self.layers:
            z, ld = layer(z)
            logdet = logdet + ld
        return z, logdet

    def layer_logdets(self, z_s: torch.Tensor) -> list[torch.Tensor]:
        out, z = [], z_s
        for layer in self.layers:
            z, ld = layer(z)
            out.append(ld)
        return out

    def inverse(self, z_f: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(z_f).all():
            raise NumericError("non-finite flow input")
        z = z_f
        for layer in reversed(self.layers):
            z = layer.inverse(z)
        return z

    def log_density(self, z_s: torch.Tensor) -> torch.Tensor:
        return flow_log_density(self, z_s)


class IdentityFlow(nn.Module):
    """Parameter-free stand-in with the flow interface (ablation and sabotage hook)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList()

    def forward(self, z_s):
        return z_s, z_s.new_zeros(z_s.shape[:-1])

    def inverse(self, z_f):
        return z_f

    def layer_logdets(self, z_s):
        return []

    def log_density(self, z_s):
        return flow_log_density(self, z_s)


def flow_log_density(flow: nn.Module, z_s: torch.Tensor) -> torch.Tensor:
    """log density of z_s when z_f = flow(z_s) is standard normal."""
    z_f, logdet = flow(z_s)
    return standard_normal_log_prob(z_f) + logdet
