"""Feature layer: factored N(0, I) prior on z_f, sentiment read-out from its last
dimension, and the upper training objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .distributions import DiagonalGaussian, standard_normal_log_prob
from .errors import DomainError
from .sentence_vae import LossBreakdown, check_finite

# Ordinal position of each label id on the sentiment axis: neg=0, pos=1, neutral=2.
ORDINAL_POSITIONS = {2: (-1.0, 1.0), 3: (-1.0, 1.0, 0.0)}


def split_feature(z_f: torch.Tensor):
    """Views (z_u, z_a): all but the last dimension, and the last dimension."""
    return z_f[..., :-1], z_f[..., -1]


class SentimentScaler(nn.Module):
    """xi: scalar z_a -> class logits.

    ``fixed`` uses logits = z_a * position (the vector [-1, 1] for two
    classes). ``learned`` uses w * position * z_a + b with w > 0, so class
    regions stay ordered along z_a.
    """

    def __init__(self, num_classes: int = 2, mode: str = "fixed"):
        super().__init__()
        if num_classes not in ORDINAL_POSITIONS:
            raise DomainError(f"unsupported number of classes {num_classes}")
        if mode not in ("fixed", "learned"):
            raise DomainError(f"unknown scaler mode {mode!r}")
        self.num_classes, self.mode = num_classes, mode
        self.register_buffer("positions", torch.tensor(ORDINAL_POSITIONS[num_classes]))
        if mode == "learned":
            self.log_weight = nn.Parameter(torch.zeros(()))
            self.bias = nn.Parameter(torch.zeros(num_classes))

    def forward(self, z_a: torch.Tensor) -> torch.Tensor:
        pos = self.positions.to(z_a.dtype)
        logits = z_a.unsqueeze(-1) * pos
        if self.mode == "learned":
            logits = logits * self.log_weight.exp() + self.bias
        return logits


def sentiment_loglik(scaler: SentimentScaler, z_a: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """log p(f | z_a) = log softmax(xi(z_a))[f]."""
    labels = torch.as_tensor(labels)
    if (labels >= scaler.num_classes).any() or (labels < 0).any():
        raise DomainError(f"labels must lie in [0, {scaler.num_classes})")
    logp = F.log_softmax(scaler(z_a), dim=-1)
    return logp.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)


def feature_kl(q: DiagonalGaussian) -> torch.Tensor:
    """Closed-form KL(q || N(0, I)) per row."""
    if (q.scale <= 0).any():
        raise DomainError("scale must be positive")
    return q.kl_standard_normal()


@dataclass
class UpperLossWeights:
    beta: float = 10.0
    gamma_kl: float = 10.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma_kl < 0:
            raise DomainError("loss weights must be non-negative")


def combine_upper(sent, prior, logdet, kl, weights: UpperLossWeights, kl_weight: float = 1.0):
    """loss = -(beta * sent + prior + logdet) + gamma * kl_weight * kl.

    ``logdet`` is the z_s -> z_f log-determinant, so ``prior + logdet`` is the
    flow density of z_s (equivalently, the prior term minus the summed
    log-determinants of the generative z_f -> z_s layers).
    """
    return -(weights.beta * sent + prior + logdet) + weights.gamma_kl * kl_weight * kl


def upper_terms(flow, scaler, posterior: DiagonalGaussian, z_s: torch.Tensor, labels: torch.Tensor):
    """Per-sample terms of the upper objective for reparameterised samples ``z_s``.

    The KL of the pushed-forward posterior to the prior is a one-sample
    estimate: log q(z_s|x) - logdet - log N(z_f).
    """
    z_f, logdet = flow(z_s)
    sent = sentiment_loglik(scaler, split_feature(z_f)[1], labels)
    prior = standard_normal_log_prob(z_f)
    kl = posterior.log_prob(z_s) - logdet - prior
    return {"sentiment_loglik": sent, "prior_logp": prior, "logdet": logdet, "kl_feature": kl}


def upper_objective(model, batch, weights: UpperLossWeights, noise: torch.Tensor,
                    kl_weight: float = 1.0) -> LossBreakdown:
    post = model.sentence.encode(batch)
    z_s = post.rsample(noise)
    t = upper_terms(model.flow, model.scaler, post, z_s, batch.labels)
    per_sample = combine_upper(t["sentiment_loglik"], t["prior_logp"], t["logdet"], t["kl_feature"],
                               weights, kl_weight)
    for name, v in t.items():
        check_finite(v, name)
    return LossBreakdown(per_sample.mean(), {k: v.mean() for k, v in t.items()})


# ---------------------------------------------------------------------------
# aggregate-posterior decomposition


def kl_decomposition(log_q_cond: torch.Tensor, log_p: torch.Tensor) -> dict[str, float]:
    """Split E_n KL(q(z|n) || p) into I(n; z) + KL(q(z) || p) by minibatch mixture.

    ``log_q_cond[b, c]`` is log q(z_b | n_c) for a sample z_b drawn from
    q(z | n_b); ``log_p[b]`` is log p(z_b).
    """
    B = log_q_cond.shape[0]
    if B < 2 or log_q_cond.shape != (B, B):
        raise DomainError("need a square matrix over at least two samples")
    log_q_own = log_q_cond.diagonal()
    log_q_agg = torch.logsumexp(log_q_cond, dim=1) - torch.log(torch.tensor(float(B), dtype=log_q_cond.dtype))
    mi = (log_q_own - log_q_agg).mean()
    marginal_kl = (log_q_agg - log_p).mean()
    direct = (log_q_own - log_p).mean()
    return {"mi": float(mi), "marginal_kl": float(marginal_kl), "expected_kl": float(direct)}


def gaussian_log_q_matrix(z: torch.Tensor, q: DiagonalGaussian) -> torch.Tensor:
    """[b, c] = log N(z_b; mean_c, scale_c)."""
    return DiagonalGaussian(q.mean.unsqueeze(0), q.scale.unsqueeze(0)).log_prob(z.unsqueeze(1))


@torch.no_grad()
def tc_decomposition_diag(model, batch, noise: torch.Tensor) -> tuple[float, float]:
    """(I(z_s; z_f) term, KL(q(z_f) || p(z_f))) for one minibatch.

    The flow is shared by every mixture component, so log q(z_f_b | x_c)
    equals log q(z_s_b | x_c) - logdet(z_s_b).
    """
    if len(batch) < 2:
        raise DomainError("tc decomposition needs at least two samples")
    post = model.sentence.encode(batch)
    z_s = post.rsample(noise)
    z_f, logdet = model.flow(z_s)
    log_q = gaussian_log_q_matrix(z_s, post) - logdet.unsqueeze(1)
    d = kl_decomposition(log_q, standard_normal_log_prob(z_f))
    return d["mi"], d["marginal_kl"]
