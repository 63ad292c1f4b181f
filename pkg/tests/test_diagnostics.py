import json
import math
from pathlib import Path

import pytest
import torch
from hypothesis import given, settings, strategies as st

from disentext import oracles
from disentext.batching import Batch
from disentext.diagnostics import (CollapseRecord, CollapseReport, MIHistory, collapse_report, estimate_mi,
                                   is_collapsed, kl_factorized, mi_converged)
from disentext.distributions import DiagonalGaussian, kl_diag_gaussians
from disentext.errors import DomainError

TRAJECTORIES = Path(__file__).parent / "fixtures" / "trajectories.json"


class TableEncoder(torch.nn.Module):
    """Posterior looked up from the first token id of each sentence."""

    def __init__(self, means, scale):
        super().__init__()
        self.means, self.scale = means, scale
        self.sentence = self

    def encode(self, batch):
        mu = self.means[batch.ids[:, 0]]
        return DiagonalGaussian(mu, torch.full_like(mu, self.scale))


def batches_of(ids, size=64):
    out = []
    for i in range(0, len(ids), size):
        chunk = torch.tensor(ids[i:i + size]).unsqueeze(1)
        out.append(Batch(chunk, torch.ones(len(chunk), dtype=torch.long), torch.zeros(len(chunk), dtype=torch.long)))
    return out


def test_mi_zero_when_posterior_is_prior():
    model = TableEncoder(torch.zeros(2, 3), 1.0)
    mi = estimate_mi(model, batches_of([0, 1] * 128), torch.Generator().manual_seed(0))
    assert mi == pytest.approx(0.0, abs=1e-6)


def test_mi_two_point_masses():
    means = torch.tensor([[-5.0], [5.0]])
    model = TableEncoder(means, 0.05)
    mi = estimate_mi(model, batches_of([0, 1] * 128), torch.Generator().manual_seed(0))
    assert mi == pytest.approx(math.log(2), rel=0.1)


def test_mi_of_separated_inputs_is_log_k():
    for k in (2, 4):
        means = torch.linspace(-3, 3, k).unsqueeze(1)
        runs = torch.tensor([estimate_mi(TableEncoder(means, 0.2), batches_of(list(range(k)) * (1024 // k)),
                                         torch.Generator().manual_seed(seed)) for seed in range(12)])
        se = float(runs.std()) / math.sqrt(len(runs))
        assert abs(float(runs.mean()) - math.log(k)) <= 3 * se + 0.01


def test_mi_nonnegative_on_random_models():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        means = torch.randn(8, 2, generator=gen) * 0.05
        mi = estimate_mi(TableEncoder(means, 1.0), batches_of(list(range(8)) * 16, 32), gen)
        assert mi >= 0.0


def test_mi_needs_enough_data():
    model = TableEncoder(torch.zeros(2, 1), 1.0)
    with pytest.raises(DomainError):
        estimate_mi(model, batches_of([0, 1] * 16, 32))
    with pytest.raises(DomainError):
        estimate_mi(model, batches_of([0, 1] * 64, 16))


def test_kl_factorized_examples():
    assert kl_factorized([(0.3, 1.2)], [(0.3, 1.2)]) == 0.0
    assert kl_factorized([(1, 1), (-1, 1)], [(0, 1), (0, 1)]) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        kl_factorized([(0, 1)], [(0, 1), (0, 1)])


def test_kl_factorized_monte_carlo():
    closed, est, se = oracles.factorized_kl_mc_gap()
    assert abs(closed - est) <= 3 * se


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3)),
                min_size=1, max_size=6))
@settings(max_examples=50, deadline=None)
def test_kl_additivity(rows):
    q = [(a, b) for a, b, _, _ in rows]
    p = [(c, d) for _, _, c, d in rows]
    qt, pt = torch.tensor(q, dtype=torch.float64), torch.tensor(p, dtype=torch.float64)
    joint = float(kl_diag_gaussians(qt[:, 0], qt[:, 1], pt[:, 0], pt[:, 1]))
    assert abs(kl_factorized(q, p) - joint) <= 1e-12 * max(1.0, abs(joint))


def history(values, window=5, eps=0.05):
    h = MIHistory(window, eps)
    for i, v in enumerate(values):
        h.append(i, v)
    return h


def test_mi_converged_examples():
    assert not mi_converged(history([0.1 * i for i in range(10)]))
    assert mi_converged(history([0.4] * 5))
    assert not mi_converged(history([0.4] * 4))


def test_plateau_detected_at_first_full_window():
    seq = [0.0, 0.2, 0.4, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]
    # the window ending at index 7 still has 0.4 as its baseline; the one ending at index 8 sees 0.6 before it
    flags = [mi_converged(history(seq[:n], eps=0.01)) for n in range(1, len(seq) + 1)]
    assert flags == [False] * 8 + [True]


@given(st.lists(st.floats(0, 2), min_size=5, max_size=15), st.floats(0, 0.5), st.floats(0, 0.5))
@settings(max_examples=80, deadline=None)
def test_mi_converged_monotone_in_epsilon(values, e1, e2):
    lo, hi = sorted((e1, e2))
    if mi_converged(history(values, eps=lo)):
        assert mi_converged(history(values, eps=hi))


def test_history_rules():
    with pytest.raises(DomainError):
        MIHistory(window=1)
    h = history([0.1, 0.2])
    with pytest.raises(DomainError):
        h.append(1, 0.3)


def test_untrained_model_is_collapsed(tiny_model, tiny_corpus, tiny_vocab):
    rep = collapse_report(tiny_model, tiny_corpus, tiny_vocab)
    rec = rep.latest
    assert rec.kl == pytest.approx(0.0, abs=1e-7)
    assert rec.flag


def test_label_coded_means_not_collapsed(tiny_model, tiny_corpus, tiny_vocab):
    class LabelCoded(torch.nn.Module):
        def encode(self, batch):
            mu = torch.zeros(len(batch), 4)
            mu[torch.arange(len(batch)), batch.labels] = 5.0
            return DiagonalGaussian(mu, torch.ones_like(mu))

    tiny_model.sentence = LabelCoded()
    rec = collapse_report(tiny_model, tiny_corpus, tiny_vocab).latest
    assert rec.active_fraction >= 0.25 and not rec.flag


def test_threshold_edges():
    assert is_collapsed(0.099, 0.0) and not is_collapsed(0.1, 0.0)
    assert not is_collapsed(0.0, 0.1) and is_collapsed(0.0, 0.099)


def test_archived_trajectories_reproduce_flags():
    runs = json.loads(TRAJECTORIES.read_text())
    assert len(runs) == 5
    seen = set()
    for run in runs:
        flags = [is_collapsed(r["kl"], r["active_fraction"]) for r in run["records"]]
        assert flags == run["expected_flags"], (run["schedule"], run["seed"])
        seen.update(flags)
    assert seen == {True, False}


def test_report_jsonl_roundtrip(tmp_path):
    rep = CollapseReport([CollapseRecord(1, 0.5, 0.2, 0.25, False), CollapseRecord(2, 0.01, 0.0, 0.0, True)])
    rep.to_jsonl(tmp_path / "c.jsonl")
    lines = (tmp_path / "c.jsonl").read_text().splitlines()
    assert set(json.loads(lines[0])) == {"step", "kl", "mi", "active_fraction", "flag"}
    assert CollapseReport.from_jsonl(tmp_path / "c.jsonl") == rep
