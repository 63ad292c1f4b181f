"""The two-layer model (sentence VAE + coupling flow + sentiment scaler) and its checkpoint archive."""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .batching import Batch
from .corpus import Vocabulary
from .errors import CheckpointError
from .feature_layer import SentimentScaler, UpperLossWeights, combine_upper, upper_terms
from .flow import CouplingFlowStack, IdentityFlow, default_split
from .sentence_vae import EmbeddingBackend, LossBreakdown, SentenceVAE, check_finite

FORMAT_VERSION = 1
NAMESPACES = {"sentence": "sentence", "flow": "flow", "scaler": "feature"}


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 16
    embed_dim: int = 32
    enc_hidden: int = 64
    dec_embed_dim: int = 32
    dec_hidden: int = 64
    max_len: int = 16
    decoder_z_input: bool = True
    decoder_z_init: bool = True
    posterior_zero_init: bool = True
    flow_layers: int = 3
    flow_split: int = 0          # 0 -> ceil(d / 2)
    flow_hidden: int = 32
    flow_alternate: bool = False
    flow_identity: bool = False
    scaler_mode: str = "auto"    # auto -> fixed for 2 classes, learned for 3
    num_classes: int = 2

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class DisentangledVAE(nn.Module):
    def __init__(self, vocab_size: int, config: ModelConfig = ModelConfig(),
                 embedding: EmbeddingBackend | None = None):
        super().__init__()
        c = config
        self.config = c
        self.sentence = SentenceVAE(vocab_size, c.latent_dim, c.embed_dim, c.enc_hidden, c.dec_embed_dim,
                                    c.dec_hidden, c.max_len, c.decoder_z_input, c.decoder_z_init,
                                    c.posterior_zero_init, embedding)
        if c.flow_identity:
            self.flow = IdentityFlow(c.latent_dim)
        else:
            self.flow = CouplingFlowStack(c.latent_dim, c.flow_layers, c.flow_split or default_split(c.latent_dim),
                                          c.flow_hidden, c.flow_alternate)
        mode = c.scaler_mode
        if mode == "auto":
            mode = "fixed" if c.num_classes == 2 else "learned"
        self.scaler = SentimentScaler(c.num_classes, mode)

    @property
    def latent_dim(self):
        return self.config.latent_dim

    # -- parameter groups used by the layer-wise update controller ----------

    def param_groups(self, freeze_decoder: bool = False, freeze_embeddings: bool = False) -> dict[str, list]:
        s = self.sentence
        enc0 = list(s.posterior_net.parameters())
        if not freeze_embeddings:
            enc0 += [p for p in s.embedding.parameters() if p.requires_grad]
        groups = {
            "encoder_0": enc0,
            "decoder_0": [] if freeze_decoder else list(s.decoder.parameters()),
            "encoder_1": list(self.flow.parameters()),
            "decoder_1": list(self.scaler.parameters()),
        }
        groups["prior"] = list(self.flow.parameters())
        return groups

    # -- encoding / generation -------------------------------------------

    @torch.no_grad()
    def posterior_mean_features(self, batch: Batch) -> torch.Tensor:
        z_s = self.sentence.encode(batch).mean
        return self.flow(z_s)[0]

    @torch.no_grad()
    def generate_from_features(self, z_f: torch.Tensor, **decode_kwargs) -> list[list[int]]:
        return self.sentence.decode(self.flow.inverse(z_f), **decode_kwargs)

    def joint_objective(self, batch: Batch, noise: torch.Tensor, kl_weight_sentence: float,
                        kl_weight_feature: float, weights: UpperLossWeights) -> LossBreakdown:
        """Lower ELBO and upper objective sharing one z_s sample per sentence."""
        post = self.sentence.encode(batch)
        z_s = post.rsample(noise)
        recon = self.sentence.reconstruction_loglik(z_s, batch.ids, batch.lengths)
        kl_s = post.kl_standard_normal()
        t = upper_terms(self.flow, self.scaler, post, z_s, batch.labels)
        upper = combine_upper(t["sentiment_loglik"], t["prior_logp"], t["logdet"], t["kl_feature"],
                              weights, kl_weight_feature)
        per_sample = -recon + kl_weight_sentence * kl_s + upper
        check_finite(per_sample, "joint_objective")
        terms = {"recon_loglik": recon.mean(), "kl_sentence": kl_s.mean()}
        terms.update({k: v.mean() for k, v in t.items()})
        return LossBreakdown(per_sample.mean(), terms)


# ---------------------------------------------------------------------------
# checkpoint archive: npz of named arrays plus a JSON manifest entry


def _archive_name(key: str) -> str:
    head, _, rest = key.partition(".")
    return f"{NAMESPACES.get(head, head)}/{rest}"


def _state_key(name: str) -> str:
    head, _, rest = name.partition("/")
    inverse = {v: k for k, v in NAMESPACES.items()}
    return f"{inverse.get(head, head)}.{rest}"


def save_checkpoint(path, model: DisentangledVAE, vocab: Vocabulary, config_hash: str = "",
                    extra: dict | None = None) -> None:
    arrays = {_archive_name(k): v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "dims_hash": model.config.digest(),
        "vocab_hash": vocab.digest(),
        "vocab": vocab.itos,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        return json.loads(bytes(data["__manifest__"]).decode())


def load_checkpoint(path, vocab: Vocabulary | None = None, config_hash: str | None = None):
    """Rebuild the model stored at ``path``; returns (model, vocab, manifest).

    Verifies the format version, the dims hash against the stored model
    config, and, when given, the vocabulary and experiment-config hashes.
    """
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    known = {f.name for f in fields(ModelConfig)}
    mcfg = ModelConfig(**{k: v for k, v in manifest["model_config"].items() if k in known})
    if mcfg.digest() != manifest["dims_hash"]:
        raise CheckpointError("model dimensions do not match the manifest hash")
    stored_vocab = Vocabulary(manifest["vocab"][4:])
    if stored_vocab.digest() != manifest["vocab_hash"]:
        raise CheckpointError("stored vocabulary does not match its hash")
    if vocab is not None and vocab.digest() != manifest["vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch")
    if config_hash is not None and config_hash != manifest["config_hash"]:
        raise CheckpointError("config hash mismatch")
    model = DisentangledVAE(len(stored_vocab), mcfg)
    with np.load(path) as data:
        state = {_state_key(k): torch.from_numpy(np.array(data[k])) for k in data.files if k != "__manifest__"}
    model.load_state_dict(state)
    return model, stored_vocab, manifest


def parameter_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
