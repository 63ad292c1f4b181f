import math

import numpy as np
import pytest
import torch

from disentext.corpus import CorpusConfig, Vocabulary, build_vocab, generate_synthetic
from disentext.distributions import DiagonalGaussian
from disentext.model import DisentangledVAE, ModelConfig
from disentext.training import build_model

torch.set_num_threads(1)

ACCEPTANCE_LINES = pytest.StashKey[list]()

TINY_MODEL = ModelConfig(latent_dim=4, embed_dim=8, enc_hidden=8, dec_embed_dim=8, dec_hidden=8,
                         flow_hidden=8, max_len=12)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(CorpusConfig(sizes=(400, 160, 160), seed=3))


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return build_vocab(tiny_corpus)


@pytest.fixture
def tiny_model(tiny_vocab):
    return build_model(len(tiny_vocab), TINY_MODEL, seed=0)


# ---------------------------------------------------------------------------
# a rigged model whose latent code is readable: sentence "vK" <-> z_a = K


RIG_VALUES = range(-5, 6)
RIG_VOCAB = Vocabulary([f"v{k}" for k in RIG_VALUES])


class RiggedSentence(torch.nn.Module):
    """Encoder puts the number in the first token into z_a; decoder emits the token for round(z_a)."""

    def __init__(self, dim):
        super().__init__()
        self.latent_dim = dim

    def encode(self, batch):
        first = [RIG_VOCAB.itos[int(i)] for i in batch.ids[:, 0]]
        mean = torch.zeros(len(first), self.latent_dim)
        mean[:, -1] = torch.tensor([float(t[1:]) for t in first])
        return DiagonalGaussian(mean, torch.ones_like(mean))

    def decode(self, z, **_):
        ks = torch.clamp(torch.round(z[:, -1]), -5, 5).long().tolist()
        return [[RIG_VOCAB.stoi[f"v{k}"]] for k in ks]


class RiggedClassifier:
    """Positive probability is a logistic function of the number in the first token."""

    passes_gate = True
    heldout_accuracy = 1.0

    def predict_proba(self, seqs):
        out = np.full((len(seqs), 2), 0.5)
        for i, s in enumerate(seqs):
            if len(s):
                k = float(RIG_VOCAB.itos[s[0]][1:])
                p = 1 / (1 + math.exp(-k))
                out[i] = (1 - p, p)
        return out

    def predict(self, seqs):
        return self.predict_proba(seqs).argmax(-1)


@pytest.fixture
def rigged():
    model = DisentangledVAE(len(RIG_VOCAB), ModelConfig(latent_dim=3, flow_identity=True))
    model.sentence = RiggedSentence(3)
    return model, RIG_VOCAB, RiggedClassifier()
