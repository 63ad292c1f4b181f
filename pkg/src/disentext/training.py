"""Two-phase training with KL annealing schedules and the MI-gated update controller.

Phase 1 fits the sentence VAE. Phase 2 fits the flow and feature layer,
optionally together with the sentence encoder, under either a joint
optimiser or the gated controller that alternates between ordinary joint
steps and ordered encoder-then-decoder sweeps once MI stops improving.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .batching import Batch, iterate_batches
from .corpus import LabeledCorpus, Vocabulary
from .diagnostics import MIHistory, collapse_record, CollapseReport, mi_converged
from .errors import CheckpointError, ConfigurationError, DomainError, NumericError, TrainingDivergedError
from .feature_layer import UpperLossWeights, split_feature, sentiment_loglik
from .flow import flow_log_density
from .model import DisentangledVAE, ModelConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

SCHEDULES = ("none", "linear", "modcyc", "gated", "modcyc+gated")
NORMAL_VAE, ORDERED_LAYERWISE, JOINT = "NORMAL_VAE", "ORDERED_LAYERWISE", "JOINT"
FEATURE_LAYER = 1   # sentence layer is 0


@dataclass
class TrainingConfig:
    lr: float = 5e-3
    optimizer: str = "adam"
    batch_size: int = 64
    phase1_epochs: int = 20
    phase2_epochs: int = 20
    anneal_epochs: float = 10.0
    cycle_length: int = 10
    lag: float = 2.0
    schedule: str = "modcyc+gated"
    beta: float = 10.0
    gamma_kl: float = 10.0
    grad_clip: float = 5.0
    seed: int = 0
    mi_window: int = 5
    mi_epsilon: float = 0.05
    mi_batch_size: int = 100
    inner_patience: int = 3
    inner_rel_tol: float = 1e-3
    inner_max_steps: int = 30
    unfreeze_phase2: bool = False
    checkpoint_every: int = 0
    single_threaded: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.cycle_length < 1:
            raise ConfigurationError("cycle_length must be >= 1")
        if self.lag < 0:
            raise ConfigurationError("lag must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")

    @property
    def uses_modcyc(self):
        return "modcyc" in self.schedule

    @property
    def uses_gate(self):
        return "gated" in self.schedule


# ---------------------------------------------------------------------------
# schedules


def linear_anneal(step: float, total_steps: float) -> float:
    if total_steps <= 0:
        raise DomainError("total_steps must be positive")
    if step < 0:
        raise DomainError("step must be non-negative")
    return min(1.0, step / total_steps)


def modcyc(epoch: int, cycle: int, lag: float) -> tuple[float, float]:
    """Lagged cyclical weights: alpha_w = tanh((e mod c)/2), alpha_f = max(0, tanh(((e mod c) - lag)/2))."""
    if cycle < 1:
        raise DomainError("cycle length must be >= 1")
    r = epoch % cycle
    return math.tanh(r / 2.0), max(0.0, math.tanh((r - lag) / 2.0))


@dataclass
class ScheduleState:
    epoch: int = 0
    alpha_w: float = 1.0
    alpha_f: float = 1.0
    kl_weight: float = 1.0
    mi_history: MIHistory = field(default_factory=MIHistory)


@dataclass(frozen=True)
class UpdatePlan:
    path: str
    steps: tuple   # ((kind, layer), ...) with kind in encoder/decoder/prior/joint

    def to_json(self) -> str:
        return json.dumps({"path": self.path, "steps": [list(s) for s in self.steps]})

    @classmethod
    def from_json(cls, text: str) -> "UpdatePlan":
        d = json.loads(text)
        return cls(d["path"], tuple(tuple(s) for s in d["steps"]))


def make_plan(converged: bool, top_layer: int = FEATURE_LAYER) -> UpdatePlan:
    if converged:
        steps = []
        for i in range(top_layer + 1):
            steps += [("encoder", i), ("decoder", i)]
        steps.append(("prior", None))
        return UpdatePlan(ORDERED_LAYERWISE, tuple(steps))
    return UpdatePlan(NORMAL_VAE, tuple(("joint", top_layer - j) for j in range(top_layer + 1)))


def plan_update(state: ScheduleState, top_layer: int = FEATURE_LAYER) -> UpdatePlan:
    return make_plan(mi_converged(state.mi_history), top_layer)


# ---------------------------------------------------------------------------
# objectives used by the controller's sub-steps


def reconstruction_objective(model: DisentangledVAE, batch: Batch, noise: torch.Tensor, beta: float):
    """Negated reconstruction terms only: -(log p(x|z_s) + beta * log p(f|z_a))."""
    post = model.sentence.encode(batch)
    z_s = post.rsample(noise)
    recon = model.sentence.reconstruction_loglik(z_s, batch.ids, batch.lengths)
    z_f, _ = model.flow(z_s)
    sent = sentiment_loglik(model.scaler, split_feature(z_f)[1], batch.labels)
    return -(recon + beta * sent).mean()


def prior_objective(model: DisentangledVAE, batch: Batch, noise: torch.Tensor):
    """Negative flow log-density of posterior samples; only the flow receives gradient."""
    with torch.no_grad():
        z_s = model.sentence.encode(batch).rsample(noise)
    return -flow_log_density(model.flow, z_s).mean()


# ---------------------------------------------------------------------------
# training loop


class MetricsLog:
    """Append-only per-epoch records, mirrored to a JSONL file when a path is given."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def without_timing(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_clock"} for r in self.records]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


@dataclass
class TrainResult:
    model: DisentangledVAE
    metrics: MetricsLog
    mi_history: MIHistory
    collapse: CollapseReport
    optimizer_steps: int = 0


def build_model(vocab_size: int, config: ModelConfig = ModelConfig(), seed: int = 0, embedding=None) -> DisentangledVAE:
    torch.manual_seed(seed)
    return DisentangledVAE(vocab_size, config, embedding)


class _Trainer:
    def __init__(self, cfg: TrainingConfig, corpus: LabeledCorpus, vocab: Vocabulary, model: DisentangledVAE,
                 metrics: MetricsLog, checkpoint_dir=None, config_hash: str = ""):
        self.cfg, self.corpus, self.vocab, self.model = cfg, corpus, vocab, model
        self.metrics = metrics
        self.rng = np.random.default_rng(cfg.seed)
        self.noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.eval_seed = cfg.seed + 2
        self.weights = UpperLossWeights(cfg.beta, cfg.gamma_kl)
        self.state = ScheduleState(mi_history=MIHistory(cfg.mi_window, cfg.mi_epsilon))
        self.collapse = CollapseReport()
        self.optimizers: dict[str, torch.optim.Optimizer] = {}
        self.steps = 0
        self.max_len = model.config.max_len
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.config_hash = config_hash
        self.best_val = math.inf
        self.last_good = copy.deepcopy(model.state_dict())
        self.epoch = 0
        self._stream = None
        self._monitor = None

    # -- plumbing ----------------------------------------------------------

    def noise(self, batch: Batch) -> torch.Tensor:
        return torch.randn((len(batch), self.model.latent_dim), generator=self.noise_gen)

    def batches(self):
        return iterate_batches(self.corpus.train, self.vocab, self.cfg.batch_size, self.rng, self.max_len)

    def next_batch(self) -> Batch:
        while True:
            if self._stream is None:
                self._stream = self.batches()
            try:
                return next(self._stream)
            except StopIteration:
                self._stream = None

    def optimizer(self, name: str, params) -> torch.optim.Optimizer | None:
        params = [p for p in params if p.requires_grad]
        if not params:
            return None
        if name not in self.optimizers:
            cls = torch.optim.Adam if self.cfg.optimizer == "adam" else torch.optim.SGD
            self.optimizers[name] = cls(params, lr=self.cfg.lr)
        return self.optimizers[name]

    def step(self, opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
        if not torch.isfinite(loss):
            raise NumericError("non-finite training loss")
        self.model.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for g in opt.param_groups for p in g["params"]]
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        opt.step()
        self.steps += 1

    # -- phases --------------------------------------------------------------

    def phase1(self, n_epochs: int):
        cfg, s = self.cfg, self.model.sentence
        params = [p for p in s.parameters() if p.requires_grad]
        opt = self.optimizer("phase1", params)
        n_batches = math.ceil(len(self.corpus.train) / cfg.batch_size)
        anneal_steps = max(cfg.anneal_epochs * n_batches, 1)
        step_in_phase = 0
        for _ in range(n_epochs):
            sums, count = {}, 0
            for batch in self.batches():
                w = 1.0 if cfg.schedule == "none" else linear_anneal(step_in_phase, anneal_steps)
                out = s.lower_elbo(batch, w, self.noise(batch))
                self.step(opt, out.loss)
                step_in_phase += 1
                count = _accumulate(sums, out.floats(), count)
            self.state.kl_weight = w
            self.end_epoch(1, JOINT, sums, count, {"kl_weight": w})

    def phase2(self, n_epochs: int):
        cfg, m = self.cfg, self.model
        freeze = not cfg.unfreeze_phase2
        groups = m.param_groups(freeze_decoder=freeze, freeze_embeddings=freeze)
        layer_params = {0: groups["encoder_0"] + groups["decoder_0"], 1: groups["encoder_1"] + groups["decoder_1"]}
        for e2 in range(n_epochs):
            a_w, a_f = modcyc(e2, cfg.cycle_length, cfg.lag) if cfg.uses_modcyc else (1.0, 1.0)
            self.state.alpha_w, self.state.alpha_f, self.state.epoch = a_w, a_f, self.epoch
            sums, count, inner = {}, 0, {}
            if cfg.uses_gate:
                plan = plan_update(self.state)
            else:
                plan = UpdatePlan(JOINT, (("joint", None),))
            if plan.path == ORDERED_LAYERWISE:
                for kind, layer in plan.steps:
                    name = "prior" if kind == "prior" else f"{kind}_{layer}"
                    inner[name] = self.until_converged(name, groups[name])
            else:
                for i, batch in enumerate(self.batches()):
                    if plan.path == JOINT:
                        opt = self.optimizer("joint", layer_params[0] + layer_params[1])
                    else:
                        layer = plan.steps[i % len(plan.steps)][1]
                        opt = self.optimizer(f"layer_{layer}", layer_params[layer])
                    out = m.joint_objective(batch, self.noise(batch), a_w, a_f, self.weights)
                    if opt is not None:
                        self.step(opt, out.loss)
                    count = _accumulate(sums, out.floats(), count)
            extra = {"alpha_w": a_w, "alpha_f": a_f, "one_minus_alpha_w": 1 - a_w,
                     "one_minus_alpha_f": 1 - a_f, "inner_steps": inner}
            self.end_epoch(2, plan.path, sums, count, extra)

    def group_objective(self, name: str, batch: Batch, noise: torch.Tensor) -> torch.Tensor:
        if name == "prior":
            return prior_objective(self.model, batch, noise)
        return reconstruction_objective(self.model, batch, noise, self.cfg.beta)

    def until_converged(self, name: str, params) -> int:
        """Repeat single-group steps until the monitored objective plateaus (bounded)."""
        opt = self.optimizer(name, params)
        if opt is None:
            return 0
        cfg = self.cfg
        if self._monitor is None:
            mb = self.next_batch()
            self._monitor = (mb, torch.randn((len(mb), self.model.latent_dim),
                                             generator=torch.Generator().manual_seed(self.eval_seed)))
        mb, mnoise = self._monitor
        with torch.no_grad():
            best = float(self.group_objective(name, mb, mnoise))
        stale, n = 0, 0
        while n < cfg.inner_max_steps and stale < cfg.inner_patience:
            batch = self.next_batch()
            self.step(opt, self.group_objective(name, batch, self.noise(batch)))
            n += 1
            with torch.no_grad():
                cur = float(self.group_objective(name, mb, mnoise))
            if cur < best - cfg.inner_rel_tol * abs(best):
                best, stale = cur, 0
            else:
                stale += 1
        return n

    # -- bookkeeping ---------------------------------------------------------

    @torch.no_grad()
    def validation_loss(self, phase: int) -> float:
        sents = self.corpus.val or self.corpus.train
        gen = torch.Generator().manual_seed(self.eval_seed)
        total, n = 0.0, 0
        for b in iterate_batches(sents, self.vocab, 256, None, self.max_len):
            noise = torch.randn((len(b), self.model.latent_dim), generator=gen)
            if phase == 1:
                out = self.model.sentence.lower_elbo(b, 1.0, noise)
            else:
                out = self.model.joint_objective(b, noise, 1.0, 1.0, self.weights)
            total += float(out.loss) * len(b)
            n += len(b)
        return total / n

    def end_epoch(self, phase: int, path: str, sums: dict, count: int, extra: dict):
        self.epoch += 1
        sents = self.corpus.val or self.corpus.train
        rec = collapse_record(self.model, sents, self.vocab, step=self.epoch, seed=self.eval_seed,
                              mi_batch_size=self.cfg.mi_batch_size)
        self.collapse.add(rec)
        if math.isfinite(rec.mi):
            self.state.mi_history.append(self.epoch, rec.mi)
        val_loss = self.validation_loss(phase)
        if not math.isfinite(val_loss):
            raise NumericError("non-finite validation loss")
        record = {"epoch": self.epoch, "phase": phase, "plan": path, "steps": self.steps,
                  "val_loss": val_loss, "val_kl": rec.kl, "val_mi": rec.mi,
                  "active_fraction": rec.active_fraction, "collapsed": rec.flag,
                  "mi_converged": mi_converged(self.state.mi_history),
                  "wall_clock": time.time()}
        record.update({f"train_{k}": v / max(count, 1) for k, v in sums.items()})
        record.update(extra)
        self.metrics.append(record)
        self.last_good = copy.deepcopy(self.model.state_dict())
        if self.checkpoint_dir:
            info = {"epoch": self.epoch, "phase": phase}
            if self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(self.checkpoint_dir / f"epoch_{self.epoch:04d}.npz", info)
            if val_loss < self.best_val:
                self.best_val = val_loss
                self.save(self.checkpoint_dir / "best.npz", info)
            self.save(self.checkpoint_dir / "last.npz", info)

    def save(self, path, info):
        save_checkpoint(path, self.model, self.vocab, self.config_hash, info)


def _accumulate(sums: dict, values: dict, count: int) -> int:
    for k, v in values.items():
        sums[k] = sums.get(k, 0.0) + v
    return count + 1


def train(config: TrainingConfig, corpus: LabeledCorpus, model: DisentangledVAE, vocab: Vocabulary,
          metrics_path=None, checkpoint_dir=None, config_hash: str = "", resume=None) -> TrainResult:
    """Run phase 1 then phase 2; returns the trained model and the per-epoch log.

    On a non-finite loss the model is reset to the state at the end of the
    last completed epoch and :class:`TrainingDivergedError` is raised.
    """
    if not corpus.train:
        raise DomainError("corpus has no training split")
    if config.single_threaded:
        torch.set_num_threads(1)
    metrics = MetricsLog(metrics_path)
    tr = _Trainer(config, corpus, vocab, model, metrics, checkpoint_dir, config_hash)
    done = 0
    if resume is not None:
        loaded, _, manifest = _resume(resume, vocab, config_hash)
        model.load_state_dict(loaded.state_dict())
        done = int(manifest["extra"].get("epoch", 0))
        tr.epoch = done
    p1 = max(config.phase1_epochs - done, 0)
    p2 = config.phase2_epochs - max(done - config.phase1_epochs, 0)
    try:
        tr.phase1(p1)
        tr.best_val = math.inf
        tr.phase2(max(p2, 0))
    except NumericError as exc:
        model.load_state_dict(tr.last_good)
        raise TrainingDivergedError(f"training diverged after epoch {tr.epoch}: {exc}",
                                    epoch=tr.epoch, last_good_state=tr.last_good) from exc
    return TrainResult(model, metrics, tr.state.mi_history, tr.collapse, tr.steps)


def _resume(path, vocab, config_hash):
    try:
        return load_checkpoint(path, vocab=vocab, config_hash=config_hash)
    except CheckpointError as exc:
        raise CheckpointError(f"refusing to resume from {path}: {exc}") from exc
