import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from disentext import oracles
from disentext.distributions import standard_normal_log_prob
from disentext.errors import DomainError, NumericError, SingularLayerError
from disentext.flow import CouplingFlowStack, CouplingLayer, IdentityFlow, default_split, flow_log_density


def constant_layer(mu=1.0, log_sigma=math.log(2.0)):
    """d=2, k=1 layer whose conditioner ignores its input and returns (mu, log sigma)."""
    layer = CouplingLayer(2, 1, hidden=3)
    with torch.no_grad():
        last = layer.conditioner[-1]
        last.weight.zero_()
        last.bias.copy_(torch.tensor([mu, log_sigma]))
    return layer


def test_zero_init_is_identity():
    flow = CouplingFlowStack(6, 3)
    z = torch.randn(10, 6)
    out, logdet = flow(z)
    assert torch.equal(out, z) and torch.equal(logdet, torch.zeros(10))


@torch.no_grad()
def test_constant_layer_forward_and_inverse():
    layer = constant_layer()
    out, logdet = layer(torch.tensor([[0.3, -1.5]]))
    assert torch.allclose(out, torch.tensor([[0.3, 2 * -1.5 + 1]]))
    assert float(logdet) == pytest.approx(math.log(2))
    back = layer.inverse(torch.tensor([[0.3, 4.0]]))
    assert torch.allclose(back, torch.tensor([[0.3, (4.0 - 1) / 2]]))


def test_roundtrip_both_directions_32bit():
    assert oracles.flow_roundtrip_error(n_params=20, n_points=1000) <= 1e-5
    flow = oracles.random_flow(5, 3, seed=4)
    z = torch.randn(1000, 5)
    assert (flow(flow.inverse(z))[0] - z).abs().max() <= 1e-5


def test_roundtrip_64bit():
    flow = oracles.random_flow(6, 3, seed=2).double()
    z = torch.randn(1000, 6, dtype=torch.float64)
    assert (flow.inverse(flow(z)[0]) - z).abs().max() <= 1e-10


@torch.no_grad()
def test_logdet_matches_fd_jacobian():
    assert oracles.flow_logdet_error(n_cases=10) <= 1e-4
    flow = oracles.random_flow(4, 2, seed=9).double()
    z = torch.randn(4, dtype=torch.float64)
    jac = oracles.fd_jacobian(lambda x: flow(x.unsqueeze(0))[0][0], z)
    sign, logabs = np.linalg.slogdet(jac.numpy())
    assert sign > 0
    assert float(flow(z.unsqueeze(0))[1]) == pytest.approx(logabs, rel=1e-4)


def test_logdet_is_sum_of_layers():
    flow = oracles.random_flow(5, 2, seed=1)
    z = torch.randn(8, 5)
    assert torch.allclose(sum(flow.layer_logdets(z)), flow(z)[1], atol=1e-6)


@given(st.integers(2, 8), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_conditioning_block_passes_through(dim, seed):
    k = default_split(dim)
    flow = oracles.random_flow(dim, k, seed=seed)
    z = torch.randn(16, dim, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(flow(z)[0][:, :k], z[:, :k])


@given(st.integers(2, 6), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(dim, seed):
    flow = oracles.random_flow(dim, max(1, dim // 2), alternate=bool(seed % 2), seed=seed)
    z = 3 * torch.randn(64, dim, generator=torch.Generator().manual_seed(seed))
    assert (flow.inverse(flow(z)[0]) - z).abs().max() <= 1e-4


def test_identity_density_is_standard_normal():
    z = torch.randn(7, 3)
    assert torch.equal(flow_log_density(IdentityFlow(3), z), standard_normal_log_prob(z))


def test_pure_scaling_density():
    class Doubling(torch.nn.Module):
        def forward(self, z):
            return 2 * z, torch.full(z.shape[:-1], math.log(2.0))

    val = float(flow_log_density(Doubling(), torch.zeros(1, 1)))
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi) + math.log(2))


def test_density_integrates_to_one():
    assert oracles.flow_density_mass() == pytest.approx(1.0, abs=0.01)


def test_split_must_be_inside():
    with pytest.raises(DomainError):
        CouplingLayer(4, 0)
    with pytest.raises(DomainError):
        CouplingLayer(4, 4)
    with pytest.raises(DomainError):
        CouplingFlowStack(4, 0)


def test_nonfinite_scale_names_layer():
    flow = CouplingFlowStack(2, 2, split=1, hidden=3)
    with torch.no_grad():
        flow.layers[1].conditioner[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericError) as exc:
        flow(torch.zeros(1, 2))
    assert "layer 1" in str(exc.value)


def test_singular_scale_detected(monkeypatch):
    layer = constant_layer()
    monkeypatch.setattr(layer, "shift_and_log_scale", lambda c: (torch.zeros(1, 1), torch.full((1, 1), -40.0)))
    with pytest.raises(SingularLayerError):
        layer.inverse(torch.zeros(1, 2))


def test_default_split_rounds_up():
    assert [default_split(d) for d in (2, 3, 16, 17)] == [1, 2, 8, 9]
