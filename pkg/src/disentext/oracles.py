"""Independent numerical oracles: finite differences, Monte Carlo, quadrature, and
plan transcriptions. Each check returns plain numbers so callers choose tolerances."""
from __future__ import annotations

import copy
import math

import numpy as np
import torch
from torch import nn

from .batching import make_batch
from .corpus import CorpusConfig, LabeledSentence, Vocabulary, build_vocab, generate_synthetic
from .diagnostics import MIHistory, kl_factorized
from .distributions import DiagonalGaussian
from .feature_layer import UpperLossWeights, upper_objective
from .flow import CouplingFlowStack, flow_log_density
from .model import DisentangledVAE, ModelConfig, parameter_digest
from .training import (NORMAL_VAE, ORDERED_LAYERWISE, ScheduleState, TrainingConfig, _Trainer, MetricsLog,
                       make_plan, modcyc, plan_update)


def random_flow(dim: int, split: int, num_layers: int = 3, hidden: int = 16, alternate: bool = False,
                scale: float = 0.3, seed: int = 0, dtype=torch.float32) -> CouplingFlowStack:
    """Coupling stack with every weight drawn from N(0, scale^2)."""
    gen = torch.Generator().manual_seed(seed)
    flow = CouplingFlowStack(dim, num_layers, split, hidden, alternate, zero_init=False).to(dtype)
    with torch.no_grad():
        for p in flow.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype) * scale)
    return flow


# ---------------------------------------------------------------------------
# flow


@torch.no_grad()
def flow_roundtrip_error(n_params: int = 100, n_points: int = 1000, seed: int = 0) -> float:
    """Worst |inverse(forward(z)) - z| and |forward(inverse(z)) - z| at 32 bits over random stacks."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p in range(n_params):
        d = int(rng.integers(2, 9))
        k = int(rng.integers(1, d))
        flow = random_flow(d, k, alternate=bool(p % 2), seed=seed * 7919 + p)
        z = torch.randn((n_points, d), generator=gen)
        worst = max(worst, float((flow.inverse(flow(z)[0]) - z).abs().max()),
                    float((flow(flow.inverse(z))[0] - z).abs().max()))
    return worst


@torch.no_grad()
def fd_jacobian(fn, z: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central-difference Jacobian of a vector map at a single point."""
    d = z.numel()
    cols = []
    for j in range(d):
        e = torch.zeros_like(z)
        e[j] = h
        cols.append((fn(z + e) - fn(z - e)) / (2 * h))
    return torch.stack(cols, dim=1)


@torch.no_grad()
def flow_logdet_error(n_cases: int = 30, max_dim: int = 6, seed: int = 0) -> float:
    """Worst relative gap between the reported logdet and log|det J| of a finite-difference Jacobian (64 bit)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in range(n_cases):
        d = int(rng.integers(2, max_dim + 1))
        k = int(rng.integers(1, d))
        flow = random_flow(d, k, alternate=bool(c % 2), scale=0.5, seed=seed * 31 + c, dtype=torch.float64)
        z = torch.from_numpy(rng.standard_normal(d))
        jac = fd_jacobian(lambda v: flow(v.unsqueeze(0))[0][0], z)
        sign, fd = torch.linalg.slogdet(jac)
        reported = float(flow(z.unsqueeze(0))[1][0])
        worst = max(worst, abs(reported - float(fd)) / max(abs(float(fd)), 1e-12))
        if float(sign) <= 0:
            worst = math.inf
    return worst


@torch.no_grad()
def flow_density_mass(seed: int = 0, n: int = 801, bound: float = 8.0) -> float:
    """Trapezoid integral of exp(flow_log_density) over [-bound, bound]^2 for a random 2-d stack."""
    flow = random_flow(2, 1, num_layers=3, scale=0.3, seed=seed, dtype=torch.float64)
    xs = torch.linspace(-bound, bound, n, dtype=torch.float64)
    gx, gy = torch.meshgrid(xs, xs, indexing="ij")
    dens = flow_log_density(flow, torch.stack([gx, gy], -1).reshape(-1, 2)).exp().reshape(n, n).numpy()
    grid = xs.numpy()
    return float(np.trapezoid(np.trapezoid(dens, grid, axis=1), grid))


# ---------------------------------------------------------------------------
# gradients


def tiny_problem(seed: int = 0, dtype=torch.float64):
    """A small model with every parameter randomised, plus a 2-sentence batch and fixed noise."""
    sents = [LabeledSentence.from_text("the food was great .", 1),
             LabeledSentence.from_text("bad service here .", 0)]
    vocab = Vocabulary(sorted({t for s in sents for t in s.tokens}))
    cfg = ModelConfig(latent_dim=4, embed_dim=5, enc_hidden=6, dec_embed_dim=5, dec_hidden=6, max_len=8,
                      flow_layers=2, flow_hidden=5, scaler_mode="learned", posterior_zero_init=False)
    torch.manual_seed(seed)
    model = DisentangledVAE(len(vocab), cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.4)
    model = model.to(dtype)
    batch = make_batch(sents, vocab)
    noise = torch.randn((2, cfg.latent_dim), generator=gen, dtype=torch.float64)
    return model, batch, noise


def lower_loss(model, batch, noise):
    return model.sentence.lower_elbo(batch, 0.7, noise.to(next(model.parameters()).dtype)).loss


def upper_loss(model, batch, noise):
    return upper_objective(model, batch, UpperLossWeights(), noise.to(next(model.parameters()).dtype), 0.8).loss


def fd_gradients(model, loss_fn, batch, noise, h: float = 1e-6) -> list[torch.Tensor]:
    """Central differences of ``loss_fn`` with respect to every parameter (evaluated in the model's dtype)."""
    grads = []
    with torch.no_grad():
        for p in model.parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss_fn(model, batch, noise))
                flat[i] = old - h
                down = float(loss_fn(model, batch, noise))
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def autograd_gradients(model, loss_fn, batch, noise) -> list[torch.Tensor]:
    model.zero_grad(set_to_none=True)
    loss_fn(model, batch, noise).backward()
    return [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in model.parameters()]


def relative_gradient_error(auto: list[torch.Tensor], ref: list[torch.Tensor]) -> float:
    """Worst per-tensor ||auto - ref|| / ||ref||; tensors with a zero reference use the absolute gap."""
    worst = 0.0
    for a, r in zip(auto, ref):
        a, r = a.double(), r.double()
        gap = float((a - r).norm())
        norm = float(r.norm())
        worst = max(worst, gap / norm if norm > 1e-10 else gap)
    return worst


def gradient_errors(seed: int = 0) -> dict[str, float]:
    """Relative autograd-vs-FD errors for both objectives; the FD reference is always 64-bit."""
    out = {}
    for name, fn in (("lower", lower_loss), ("upper", upper_loss)):
        m64, batch, noise = tiny_problem(seed, torch.float64)
        ref = fd_gradients(m64, fn, batch, noise)
        out[f"{name}_64"] = relative_gradient_error(autograd_gradients(m64, fn, batch, noise), ref)
        m32 = copy.deepcopy(m64).to(torch.float32)
        out[f"{name}_32"] = relative_gradient_error(autograd_gradients(m32, fn, batch, noise), ref)
    return out


# ---------------------------------------------------------------------------
# closed forms


def kl_mc_gap(n: int = 100_000, dim: int = 3, seed: int = 0) -> tuple[float, float, float]:
    """(closed-form KL(q || p), MC estimate, standard error) for random diagonal Gaussians q, p."""
    g = torch.Generator().manual_seed(seed)
    mq, mp = torch.randn(dim, generator=g, dtype=torch.float64), torch.randn(dim, generator=g, dtype=torch.float64)
    sq = torch.rand(dim, generator=g, dtype=torch.float64) + 0.5
    sp = torch.rand(dim, generator=g, dtype=torch.float64) + 0.5
    q, p = DiagonalGaussian(mq, sq), DiagonalGaussian(mp, sp)
    z = q.mean + q.scale * torch.randn((n, dim), generator=g, dtype=torch.float64)
    ratio = q.log_prob(z) - p.log_prob(z)
    closed = float(torch.distributions.kl_divergence(torch.distributions.Normal(mq, sq),
                                                      torch.distributions.Normal(mp, sp)).sum())
    return closed, float(ratio.mean()), float(ratio.std() / math.sqrt(n))


def standard_normal_kl_mc_gap(n: int = 100_000, dim: int = 4, seed: int = 1) -> tuple[float, float, float]:
    """Same as :func:`kl_mc_gap` for the closed form against N(0, I) used by the VAE."""
    g = torch.Generator().manual_seed(seed)
    q = DiagonalGaussian(torch.randn(dim, generator=g, dtype=torch.float64),
                         torch.rand(dim, generator=g, dtype=torch.float64) + 0.3)
    z = q.mean + q.scale * torch.randn((n, dim), generator=g, dtype=torch.float64)
    p = DiagonalGaussian(torch.zeros(dim, dtype=torch.float64), torch.ones(dim, dtype=torch.float64))
    ratio = q.log_prob(z) - p.log_prob(z)
    return float(q.kl_standard_normal()), float(ratio.mean()), float(ratio.std() / math.sqrt(n))


def factorized_kl_mc_gap(n: int = 100_000, dim: int = 5, seed: int = 2) -> tuple[float, float, float]:
    """Sum of per-dimension KLs (factorised closed form) against an MC estimate of the joint KL."""
    rng = np.random.default_rng(seed)
    qp = [(float(rng.normal()), float(rng.uniform(0.5, 1.5))) for _ in range(dim)]
    pp = [(float(rng.normal()), float(rng.uniform(0.5, 1.5))) for _ in range(dim)]
    q = DiagonalGaussian(torch.tensor([m for m, _ in qp], dtype=torch.float64),
                         torch.tensor([s for _, s in qp], dtype=torch.float64))
    p = DiagonalGaussian(torch.tensor([m for m, _ in pp], dtype=torch.float64),
                         torch.tensor([s for _, s in pp], dtype=torch.float64))
    g = torch.Generator().manual_seed(seed)
    z = q.mean + q.scale * torch.randn((n, dim), generator=g, dtype=torch.float64)
    ratio = q.log_prob(z) - p.log_prob(z)
    return kl_factorized(qp, pp), float(ratio.mean()), float(ratio.std() / math.sqrt(n))


def modcyc_checks() -> dict[str, bool]:
    exact = modcyc(2, 10, 0.0)[0] == math.tanh(1.0) and modcyc(12, 10, 3.0)[0] == math.tanh(1.0)
    lagged = modcyc(4, 10, 2.0)[1] == math.tanh(1.0) and modcyc(2, 10, 2.0)[1] == 0.0
    zero = modcyc(0, 5, 1.0) == (0.0, 0.0)
    lag_ok = all(a_f <= a_w for c in range(1, 13) for lag in (0.0, 0.5, 1.0, 2.0, 3.5)
                 for e in range(60) for a_w, a_f in [modcyc(e, c, lag)])
    periodic = all(modcyc(e, c, 1.5) == modcyc(e + c, c, 1.5) for c in range(1, 13) for e in range(40))
    return {"closed_form": exact and lagged and zero, "lag": lag_ok, "periodic": periodic}


# ---------------------------------------------------------------------------
# controller


def expected_plan(converged: bool, top_layer: int) -> tuple[str, list]:
    """Direct transcription of the gated update's two branches."""
    if converged:
        steps = []
        for layer in range(0, top_layer + 1):
            steps.append(("encoder", layer))
            steps.append(("decoder", layer))
        return ORDERED_LAYERWISE, steps + [("prior", None)]
    return NORMAL_VAE, [("joint", layer) for layer in range(top_layer, -1, -1)]


def plan_table() -> list[dict]:
    rows = []
    for top in (1, 2, 3):
        for converged in (False, True):
            plan = make_plan(converged, top)
            path, steps = expected_plan(converged, top)
            rows.append({"layers": top, "converged": converged, "path": plan.path,
                         "match": plan.path == path and list(plan.steps) == steps})
    empty = plan_update(ScheduleState(mi_history=MIHistory(5, 0.05))).path == NORMAL_VAE
    flat_hist = MIHistory(5, 0.05)
    for i in range(6):
        flat_hist.append(i, 1.0)
    flat = plan_update(ScheduleState(mi_history=flat_hist)).path == ORDERED_LAYERWISE
    rows.append({"layers": 1, "converged": None, "path": "history", "match": empty and flat})
    return rows


def isolation_deltas(seed: int = 0) -> list[dict]:
    """Run each ordered sub-step once on a small model; record which parameters moved."""
    corpus = generate_synthetic(CorpusConfig(sizes=(256, 64, 64), seed=seed + 11))
    vocab = build_vocab(corpus)
    torch.manual_seed(seed)
    model = DisentangledVAE(len(vocab), ModelConfig(latent_dim=6, embed_dim=8, enc_hidden=8, dec_embed_dim=8,
                                                    dec_hidden=8, flow_hidden=8, scaler_mode="learned"))
    cfg = TrainingConfig(seed=seed, inner_max_steps=3, inner_patience=3, unfreeze_phase2=True, batch_size=32)
    tr = _Trainer(cfg, corpus, vocab, model, MetricsLog())
    groups = model.param_groups()
    named = dict(model.named_parameters())
    rows = []
    for kind, layer in make_plan(True).steps:
        name = "prior" if kind == "prior" else f"{kind}_{layer}"
        before = {k: parameter_digest([p]) for k, p in named.items()}
        n = tr.until_converged(name, groups[name])
        after = {k: parameter_digest([p]) for k, p in named.items()}
        allowed = {k for k, p in named.items() if any(p is q for q in groups[name])}
        moved = {k for k in named if before[k] != after[k]}
        rows.append({"step": name, "inner_steps": n, "moved": len(moved), "allowed": len(allowed),
                     "outside": len(moved - allowed), "ok": bool(moved) and moved <= allowed})
    return rows


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
