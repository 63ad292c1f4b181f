"""Mutual-information and KL diagnostics, the MI plateau test, and collapse reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch

from .batching import Batch, iterate_batches
from .distributions import DiagonalGaussian, kl_diag_gaussians, standard_normal_log_prob
from .errors import DomainError
from .feature_layer import gaussian_log_q_matrix, kl_decomposition

ACTIVE_UNIT_THRESHOLD = 0.01
COLLAPSE_KL = 0.1
COLLAPSE_ACTIVE_FRACTION = 0.1


def mi_from_posterior(post: DiagonalGaussian, noise: torch.Tensor) -> float:
    """Minibatch-mixture estimate of I(x; z) for one batch (not clipped)."""
    z = post.rsample(noise)
    log_q = gaussian_log_q_matrix(z, post)
    d = kl_decomposition(log_q, standard_normal_log_prob(z))
    closed_kl = float(post.kl_standard_normal().mean())
    return closed_kl - d["marginal_kl"]


@torch.no_grad()
def estimate_mi(model, batches: Sequence[Batch], generator: torch.Generator | None = None,
                min_batches: int = 4, min_batch_size: int = 32) -> float:
    """I_q(x; z_s) averaged over batches, clipped at zero.

    Per batch: mean closed-form KL(q(z|x_b) || p) minus the mixture estimate
    of KL(q(z) || p), with q(z) approximated by (1/B) sum_b' q(z | x_b').
    """
    batches = list(batches)
    if len(batches) < min_batches or any(len(b) < min_batch_size for b in batches):
        raise DomainError(f"need >= {min_batches} batches of >= {min_batch_size} sentences")
    vals = []
    for b in batches:
        post = model.sentence.encode(b)
        noise = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
        vals.append(mi_from_posterior(post, noise))
    return max(0.0, sum(vals) / len(vals))


def kl_factorized(q: Sequence[tuple[float, float]], p: Sequence[tuple[float, float]]) -> float:
    """Sum of per-dimension KL(q_i || p_i) for 1-d Gaussians given as (mean, std) pairs.

    For fully factorised Gaussians this is the joint KL exactly.
    """
    if len(q) != len(p):
        raise DomainError(f"dimension mismatch: {len(q)} vs {len(p)}")
    qt = torch.tensor(q, dtype=torch.float64).reshape(-1, 2)
    pt = torch.tensor(p, dtype=torch.float64).reshape(-1, 2)
    per_dim = kl_diag_gaussians(qt[:, 0:1], qt[:, 1:2], pt[:, 0:1], pt[:, 1:2])
    return float(per_dim.sum())


@dataclass
class MIHistory:
    window: int = 5
    epsilon: float = 0.05
    entries: list = field(default_factory=list)   # (step, mi)

    def __post_init__(self):
        if self.window < 2:
            raise DomainError("window must be >= 2")

    def append(self, step: int, value: float) -> None:
        if self.entries and step <= self.entries[-1][0]:
            raise DomainError(f"step {step} is not after {self.entries[-1][0]}")
        self.entries.append((int(step), float(value)))

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.entries]


def mi_converged(history: MIHistory) -> bool:
    """True when the last ``window`` estimates add at most ``epsilon`` over the best earlier one.

    With exactly ``window`` entries the first one serves as the baseline.
    """
    vals = history.values
    W = history.window
    if len(vals) < W:
        return False
    recent = vals[-W:]
    before = vals[:-W] or recent[:1]
    return max(recent) - max(before) <= history.epsilon


# ---------------------------------------------------------------------------
# collapse reports


@dataclass
class CollapseRecord:
    step: int
    kl: float
    mi: float
    active_fraction: float
    flag: bool


def is_collapsed(kl: float, active_fraction: float) -> bool:
    return kl < COLLAPSE_KL and active_fraction < COLLAPSE_ACTIVE_FRACTION


@dataclass
class CollapseReport:
    records: list = field(default_factory=list)

    def add(self, record: CollapseRecord) -> None:
        self.records.append(record)

    @property
    def latest(self) -> CollapseRecord:
        return self.records[-1]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "CollapseReport":
        with open(path, encoding="utf-8") as fh:
            return cls([CollapseRecord(**json.loads(line)) for line in fh if line.strip()])


@torch.no_grad()
def posterior_stats(model, sentences, vocab, batch_size: int = 128):
    """(mean KL to the prior, per-dim variance of posterior means) over ``sentences``."""
    means, kls = [], []
    for b in iterate_batches(sentences, vocab, batch_size):
        post = model.sentence.encode(b)
        means.append(post.mean)
        kls.append(post.kl_standard_normal())
    mu = torch.cat(means)
    return float(torch.cat(kls).mean()), mu.var(0, unbiased=False)


@torch.no_grad()
def collapse_record(model, sentences, vocab, step: int = 0, seed: int = 0,
                    mi_batch_size: int | None = None) -> CollapseRecord:
    kl, var = posterior_stats(model, sentences, vocab)
    active = float((var > ACTIVE_UNIT_THRESHOLD).float().mean())
    bs = mi_batch_size or max(32, len(sentences) // 4)
    batches = [b for b in iterate_batches(sentences, vocab, bs) if len(b) >= 32]
    gen = torch.Generator().manual_seed(seed)
    mi = estimate_mi(model, batches, gen) if len(batches) >= 4 else float("nan")
    return CollapseRecord(int(step), kl, mi, active, is_collapsed(kl, active))


def collapse_report(model, corpus, vocab, history: Iterable[CollapseRecord] = (), seed: int = 0) -> CollapseReport:
    """Report with any earlier per-epoch records plus the current model on the validation split."""
    report = CollapseReport(list(history))
    sents = corpus.val or corpus.train
    step = report.records[-1].step + 1 if report.records else 0
    report.add(collapse_record(model, sents, vocab, step=step, seed=seed))
    return report
