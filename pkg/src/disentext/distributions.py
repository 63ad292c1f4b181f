"""Diagonal Gaussians and closed-form KL terms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DomainError

LOG_2PI = math.log(2.0 * math.pi)


def standard_normal_log_prob(z: torch.Tensor) -> torch.Tensor:
    """log N(z; 0, I) summed over the last dimension."""
    return -0.5 * (z.pow(2) + LOG_2PI).sum(-1)


@dataclass
class DiagonalGaussian:
    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise DomainError(f"mean {tuple(self.mean.shape)} and scale {tuple(self.scale.shape)} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def rsample(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.shape != self.mean.shape:
            raise DomainError(f"noise shape {tuple(noise.shape)} != {tuple(self.mean.shape)}")
        return self.mean + self.scale * noise

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        u = (z - self.mean) / self.scale
        return -0.5 * (u.pow(2) + LOG_2PI).sum(-1) - self.scale.log().sum(-1)

    def kl_standard_normal(self) -> torch.Tensor:
        """KL(self || N(0, I)) per row: 0.5 * sum(mu^2 + s^2 - 1 - 2 log s)."""
        return kl_diag_gaussians(self.mean, self.scale,
                                 torch.zeros_like(self.mean), torch.ones_like(self.scale))

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.scale.detach())


def kl_diag_gaussians(mu_q, sd_q, mu_p, sd_p) -> torch.Tensor:
    """Closed-form KL(N(mu_q, sd_q^2) || N(mu_p, sd_p^2)) summed over the last dim."""
    if (torch.as_tensor(sd_q) <= 0).any() or (torch.as_tensor(sd_p) <= 0).any():
        raise DomainError("scales must be strictly positive")
    var_ratio = (sd_q / sd_p).pow(2)
    return 0.5 * (var_ratio + ((mu_q - mu_p) / sd_p).pow(2) - 1.0 - var_ratio.log()).sum(-1)
