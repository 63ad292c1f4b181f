"""Sentence layer: mean-pooled embeddings, Gaussian posterior, GRU decoder, lower ELBO."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .batching import Batch
from .corpus import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .distributions import DiagonalGaussian
from .errors import DomainError, NumericError

logger = logging.getLogger(__name__)

LOG_SCALE_MIN, LOG_SCALE_MAX = -6.0, 3.0


@dataclass
class LossBreakdown:
    """A scalar loss plus the batch-mean value of each of its terms."""

    loss: torch.Tensor
    terms: dict = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["loss"] = float(self.loss.detach())
        return out


class EmbeddingBackend(nn.Module):
    """Per-token vectors; either a trainable table or vectors loaded frozen from a file."""

    def __init__(self, vocab_size: int, dim: int, weights: torch.Tensor | None = None, frozen: bool = False):
        super().__init__()
        if dim <= 0:
            raise DomainError("embedding dim must be positive")
        self.table = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        if weights is not None:
            if tuple(weights.shape) != (vocab_size, dim):
                raise DomainError(f"embedding weights {tuple(weights.shape)} != {(vocab_size, dim)}")
            with torch.no_grad():
                self.table.weight.copy_(weights)
        self.table.weight.requires_grad_(not frozen)
        self.mode = "external-file" if frozen else "trainable-table"

    @property
    def dim(self) -> int:
        return self.table.embedding_dim

    def forward(self, ids):
        return self.table(ids)

    @classmethod
    def from_file(cls, path, vocab: Vocabulary, seed: int = 0) -> "EmbeddingBackend":
        """Load whitespace-separated ``token v1 ... vE`` rows; missing tokens get small random vectors."""
        found = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip().split()
                if len(parts) < 2 or parts[0] not in vocab:
                    continue
                found[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
        if not found:
            raise DomainError(f"no vocabulary token has a vector in {path}")
        dim = len(next(iter(found.values())))
        rng = np.random.default_rng(seed)
        weights = rng.normal(0.0, 0.1, size=(len(vocab), dim)).astype(np.float32)
        weights[PAD_ID] = 0.0
        for tok, vec in found.items():
            if len(vec) != dim:
                raise DomainError(f"vector for {tok!r} has dim {len(vec)}, expected {dim}")
            weights[vocab.stoi[tok]] = vec
        logger.info("loaded %d/%d vectors from %s", len(found), len(vocab), path)
        return cls(len(vocab), dim, torch.from_numpy(weights), frozen=True)


class PosteriorNet(nn.Module):
    """g_phi: sentence encoding -> (mean, log scale)."""

    def __init__(self, in_dim: int, hidden: int, latent_dim: int, zero_init: bool = True):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, 2 * latent_dim)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, e_s):
        mean, log_scale = self.out(torch.tanh(self.hidden(e_s))).chunk(2, dim=-1)
        return mean, log_scale


class SequenceDecoder(nn.Module):
    """GRU decoder p(x | z_s) with z_s fed at every step and/or used for the initial state."""

    def __init__(self, vocab_size: int, latent_dim: int, embed_dim: int, hidden: int,
                 z_input: bool = True, z_init: bool = True):
        super().__init__()
        if not (z_input or z_init):
            raise DomainError("decoder must be conditioned on z_s somehow")
        self.vocab_size = vocab_size
        self.z_input, self.z_init = z_input, z_init
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.rnn = nn.GRU(embed_dim + (latent_dim if z_input else 0), hidden, batch_first=True)
        self.init = nn.Linear(latent_dim, hidden) if z_init else None
        self.out = nn.Linear(hidden, vocab_size)
        self.hidden_size = hidden

    def initial_state(self, z):
        if self.init is None:
            return z.new_zeros(1, z.shape[0], self.hidden_size)
        return torch.tanh(self.init(z)).unsqueeze(0)

    def step_inputs(self, tokens, z):
        emb = self.embed(tokens)
        if self.z_input:
            emb = torch.cat([emb, z.unsqueeze(1).expand(-1, emb.shape[1], -1)], dim=-1)
        return emb

    def forward(self, z, inputs, h0=None):
        """Logits for every position of ``inputs`` (B, L) under teacher forcing."""
        h0 = self.initial_state(z) if h0 is None else h0
        out, h = self.rnn(self.step_inputs(inputs, z), h0)
        return self.out(out), h


def teacher_forcing(ids: torch.Tensor, lengths: torch.Tensor):
    """Decoder inputs [BOS, x_1..x_L] and targets [x_1..x_L, EOS], padded."""
    B, L = ids.shape
    inputs = torch.cat([ids.new_full((B, 1), BOS_ID), ids], dim=1)
    targets = torch.cat([ids, ids.new_full((B, 1), PAD_ID)], dim=1)
    targets[torch.arange(B), lengths] = EOS_ID
    mask = torch.arange(L + 1).unsqueeze(0) <= lengths.unsqueeze(1)
    return inputs, targets, mask


class SentenceVAE(nn.Module):
    def __init__(self, vocab_size: int, latent_dim: int = 16, embed_dim: int = 32, enc_hidden: int = 64,
                 dec_embed_dim: int = 32, dec_hidden: int = 64, max_len: int = 16,
                 z_input: bool = True, z_init: bool = True, zero_init: bool = True,
                 embedding: EmbeddingBackend | None = None):
        super().__init__()
        self.vocab_size, self.latent_dim, self.max_len = vocab_size, latent_dim, max_len
        self.embedding = embedding or EmbeddingBackend(vocab_size, embed_dim)
        self.posterior_net = PosteriorNet(self.embedding.dim, enc_hidden, latent_dim, zero_init)
        self.decoder = SequenceDecoder(vocab_size, latent_dim, dec_embed_dim, dec_hidden, z_input, z_init)

    # -- encoder ---------------------------------------------------------

    def _check_ids(self, ids):
        if ids.numel() and int(ids.max()) >= self.vocab_size:
            raise DomainError(f"token id {int(ids.max())} >= vocabulary size {self.vocab_size}")

    def embed_sentence(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Mean of token vectors over each sentence, E_s = (1/|x|) sum_w e_w."""
        if (lengths <= 0).any():
            raise DomainError("cannot embed an empty sentence")
        self._check_ids(ids)
        mask = (torch.arange(ids.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)).to(self.embedding.table.weight.dtype)
        vecs = self.embedding(ids) * mask.unsqueeze(-1)
        return vecs.sum(1) / lengths.unsqueeze(1).to(vecs.dtype)

    def posterior(self, e_s: torch.Tensor) -> DiagonalGaussian:
        mean, log_scale = self.posterior_net(e_s)
        bad = ~(torch.isfinite(mean).all(-1) & torch.isfinite(log_scale).all(-1))
        if bad.any():
            i = int(bad.nonzero()[0])
            raise NumericError(f"non-finite posterior parameters for batch index {i}", index=i)
        log_scale = log_scale.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)
        return DiagonalGaussian(mean, log_scale.exp())

    def encode(self, batch: Batch) -> DiagonalGaussian:
        return self.posterior(self.embed_sentence(batch.ids, batch.lengths))

    @staticmethod
    def sample(posterior: DiagonalGaussian, noise: torch.Tensor) -> torch.Tensor:
        return posterior.rsample(noise)

    # -- decoder ---------------------------------------------------------

    def reconstruction_loglik(self, z: torch.Tensor, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Per-sentence sum_j log p(x_j | x_<j, z_s), including the closing EOS."""
        self._check_ids(ids)
        inputs, targets, mask = teacher_forcing(ids, lengths)
        logits, _ = self.decoder(z, inputs)
        logp = F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return (logp * mask.to(logp.dtype)).sum(-1)

    @torch.no_grad()
    def decode(self, z: torch.Tensor, mode: str = "greedy", temperature: float = 1.0,
               max_len: int | None = None, generator: torch.Generator | None = None) -> list[list[int]]:
        """Generate token ids (without BOS/EOS) for each row of ``z``."""
        max_len = self.max_len if max_len is None else max_len
        if max_len <= 0:
            raise DomainError("max_len must be positive")
        if mode not in ("greedy", "sample"):
            raise DomainError(f"unknown decode mode {mode!r}")
        if mode == "sample" and temperature <= 0:
            raise DomainError("temperature must be positive")
        B = z.shape[0]
        h = self.decoder.initial_state(z)
        tok = torch.full((B, 1), BOS_ID, dtype=torch.long)
        out = [[] for _ in range(B)]
        done = torch.zeros(B, dtype=torch.bool)
        for _ in range(max_len + 1):
            logits, h = self.decoder(z, tok, h)
            logits = logits[:, -1]
            if mode == "greedy":
                nxt = logits.argmax(-1)
            else:
                probs = F.softmax(logits.double() / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            for i in range(B):
                if done[i]:
                    continue
                t = int(nxt[i])
                if t == EOS_ID or len(out[i]) >= max_len:
                    done[i] = True
                else:
                    out[i].append(t)
            if done.all():
                break
            tok = nxt.unsqueeze(1)
        return out

    # -- objective -------------------------------------------------------

    def lower_elbo(self, batch: Batch, kl_weight: float, noise: torch.Tensor) -> LossBreakdown:
        """Negative ELBO with a weighted closed-form KL to N(0, I)."""
        if len(batch) == 0:
            raise DomainError("empty batch")
        post = self.encode(batch)
        z = post.rsample(noise)
        recon = self.reconstruction_loglik(z, batch.ids, batch.lengths)
        kl = post.kl_standard_normal()
        per_sample = -recon + kl_weight * kl
        check_finite(per_sample, "lower_elbo")
        return LossBreakdown(per_sample.mean(), {"recon_loglik": recon.mean(), "kl_sentence": kl.mean(),
                                                 "kl_weight": torch.tensor(float(kl_weight))})


def check_finite(values: torch.Tensor, where: str) -> None:
    bad = ~torch.isfinite(values)
    if bad.any():
        i = int(bad.nonzero()[0])
        raise NumericError(f"non-finite {where} at sample index {i}", index=i, where=where)
