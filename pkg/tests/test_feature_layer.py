import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from disentext import oracles
from disentext.batching import make_batch
from disentext.corpus import LabeledSentence
from disentext.distributions import DiagonalGaussian, standard_normal_log_prob
from disentext.errors import DomainError, NumericError
from disentext.feature_layer import (SentimentScaler, UpperLossWeights, combine_upper, feature_kl,
                                     gaussian_log_q_matrix, kl_decomposition, sentiment_loglik, split_feature,
                                     tc_decomposition_diag, upper_objective)
from disentext.model import DisentangledVAE, ModelConfig


def test_views_pick_last_dimension():
    z = torch.arange(12.0).reshape(3, 4)
    z_u, z_a = split_feature(z)
    assert torch.equal(z_a, z[:, 3]) and torch.equal(z_u, z[:, :3])
    z_a.fill_(0)  # views alias the tensor
    assert (z[:, 3] == 0).all()


def test_fixed_scaler_values():
    xi = SentimentScaler(2)
    assert torch.equal(xi(torch.tensor([1.0])), torch.tensor([[-1.0, 1.0]]))
    assert float(sentiment_loglik(xi, torch.tensor(0.0), torch.tensor(1))) == pytest.approx(-math.log(2))
    assert float(sentiment_loglik(xi, torch.tensor(0.5), torch.tensor(1))) == pytest.approx(math.log(0.7310586),
                                                                                         rel=1e-6)
    assert float(sentiment_loglik(xi, torch.tensor(50.0), torch.tensor(1))) == pytest.approx(0.0, abs=1e-12)


def test_label_outside_classes_rejected():
    with pytest.raises(DomainError):
        sentiment_loglik(SentimentScaler(2), torch.tensor([0.0]), torch.tensor([2]))


@given(st.floats(-20, 20), st.floats(-20, 20))
@settings(max_examples=60, deadline=None)
def test_loglik_monotone_for_positive_label(a, b):
    xi = SentimentScaler(2)
    la = float(sentiment_loglik(xi, torch.tensor(a, dtype=torch.float64), torch.tensor(1)))
    lb = float(sentiment_loglik(xi, torch.tensor(b, dtype=torch.float64), torch.tensor(1)))
    if a < b:
        assert la <= lb


@given(st.floats(-10, 10).filter(lambda x: abs(x) > 1e-6))
@settings(max_examples=60, deadline=None)
def test_argmax_is_sign(z):
    pred = int(SentimentScaler(2)(torch.tensor(z)).argmax())
    assert pred == int(z > 0)


@given(st.floats(0.01, 100), st.floats(-5, 5))
@settings(max_examples=40, deadline=None)
def test_learned_scale_keeps_argmax(c, z):
    xi = SentimentScaler(3, "learned")
    with torch.no_grad():
        xi.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
    before = int(xi(torch.tensor(z)).argmax())
    with torch.no_grad():
        xi.log_weight.add_(math.log(c))
        xi.bias.mul_(c)
    assert int(xi(torch.tensor(z)).argmax()) == before


def test_feature_kl_values():
    assert float(feature_kl(DiagonalGaussian(torch.zeros(1, 3), torch.ones(1, 3)))) == 0.0
    assert float(feature_kl(DiagonalGaussian(torch.tensor([[1.0, 0.0]]), torch.ones(1, 2)))) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        feature_kl(DiagonalGaussian(torch.zeros(1, 2), torch.tensor([[1.0, 0.0]])))


def test_feature_kl_monte_carlo():
    closed, est, se = oracles.standard_normal_kl_mc_gap()
    assert abs(closed - est) <= 3 * se


def test_weights_default_and_validation():
    assert UpperLossWeights() == UpperLossWeights(10.0, 10.0)
    with pytest.raises(DomainError):
        UpperLossWeights(beta=-1)


def test_upper_loss_arithmetic():
    w = UpperLossWeights(10, 10)
    # the logdet here is the z_s -> z_f direction, so it enters with a plus sign
    loss = combine_upper(torch.tensor(-0.3), torch.tensor(-2.1), torch.tensor(0.4), torch.tensor(0.7), w)
    assert float(loss) == pytest.approx(-(10 * -0.3 + -2.1 + 0.4) + 10 * 0.7)
    assert float(loss) == pytest.approx(11.7)
    half = combine_upper(torch.tensor(-0.3), torch.tensor(-2.1), torch.tensor(0.4), torch.tensor(0.7), w, 0.5)
    assert float(half) == pytest.approx(8.2)


def _prior_model(vocab):
    model = DisentangledVAE(len(vocab), ModelConfig(latent_dim=4, flow_identity=True))
    return model


def test_upper_objective_collapses_to_prior_terms(tiny_vocab):
    model = _prior_model(tiny_vocab)
    sents = [LabeledSentence.from_text("the pizza was great .", 1), LabeledSentence.from_text("bad tea .", 0)]
    batch = make_batch(sents, tiny_vocab)
    noise = torch.randn(2, 4, generator=torch.Generator().manual_seed(0))
    out = upper_objective(model, batch, UpperLossWeights(), noise)
    z = noise  # posterior is the prior, so z_s = noise and z_f = z_s
    sent = sentiment_loglik(model.scaler, z[:, -1], batch.labels)
    expected = -(10 * sent + standard_normal_log_prob(z)).mean()
    assert float(out.loss.detach()) == pytest.approx(float(expected), rel=1e-6)
    assert out.floats()["kl_feature"] == pytest.approx(0.0, abs=1e-6)
    assert set(out.terms) == {"sentiment_loglik", "prior_logp", "logdet", "kl_feature"}


def test_upper_objective_nonfinite_names_term(tiny_vocab):
    model = _prior_model(tiny_vocab)
    batch = make_batch([LabeledSentence.from_text("good", 1)], tiny_vocab)

    class InfLogdet(torch.nn.Module):
        def forward(self, z):
            return z, torch.full(z.shape[:-1], float("inf"))

    model.flow = InfLogdet()
    with pytest.raises(NumericError) as exc:
        upper_objective(model, batch, UpperLossWeights(), torch.zeros(1, 4))
    assert exc.value.where in ("logdet", "kl_feature", "prior_logp", "sentiment_loglik")


class _Fixed(torch.nn.Module):
    """Minimal model exposing encode and flow for the decomposition tests."""

    def __init__(self, post, flow):
        super().__init__()
        self._post, self.flow = post, flow
        self.sentence = self

    def encode(self, batch):
        return self._post


def test_decomposition_no_dependence():
    B, d = 256, 3
    post = DiagonalGaussian(torch.full((B, d), 0.4), torch.full((B, d), 0.7))
    m = _Fixed(post, oracles.random_flow(d, 2, seed=0))
    mi, _ = tc_decomposition_diag(m, torch.zeros(B), torch.randn(B, d, generator=torch.Generator().manual_seed(0)))
    assert abs(mi) < 1e-6


def test_decomposition_two_clusters():
    B = 512
    mean = torch.zeros(B, 2)
    mean[: B // 2, 1], mean[B // 2:, 1] = -5.0, 5.0
    post = DiagonalGaussian(mean, torch.full((B, 2), 0.1))
    m = _Fixed(post, oracles.random_flow(2, 1, seed=1))
    mi, _ = tc_decomposition_diag(m, torch.zeros(B), torch.randn(B, 2, generator=torch.Generator().manual_seed(1)))
    # with B equiprobable near-delta inputs in two clusters the minibatch mixture sees log 2 of information
    assert mi == pytest.approx(math.log(2), rel=0.1)


def test_decomposition_terms_sum_to_expected_kl():
    gen = torch.Generator().manual_seed(5)
    sums, direct = [], []
    for _ in range(10):
        B, d = 64, 3
        post = DiagonalGaussian(torch.randn(B, d, generator=gen), 0.5 + torch.rand(B, d, generator=gen))
        z = post.rsample(torch.randn(B, d, generator=gen))
        parts = kl_decomposition(gaussian_log_q_matrix(z, post), standard_normal_log_prob(z))
        sums.append(parts["mi"] + parts["marginal_kl"])
        direct.append(float(post.kl_standard_normal().mean()))
    sums, direct = torch.tensor(sums), torch.tensor(direct)
    diff = sums - direct
    se = diff.std() / math.sqrt(len(diff))
    assert abs(float(diff.mean())) <= 3 * float(se) + 1e-9


def test_decomposition_needs_two_samples():
    with pytest.raises(DomainError):
        kl_decomposition(torch.zeros(1, 1), torch.zeros(1))


def test_gradients_match_finite_differences():
    err = oracles.gradient_errors(seed=1)
    assert err["lower_64"] <= 1e-6 and err["upper_64"] <= 1e-6
    assert err["lower_32"] <= 1e-3 and err["upper_32"] <= 1e-3
