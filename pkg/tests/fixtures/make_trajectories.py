"""Regenerate trajectories.json: per-epoch collapse records from five tiny training runs.

Run from the repository root: ``python3 tests/fixtures/make_trajectories.py``.
The expected flags in the file were then checked by hand against the two thresholds.
"""
import json
from dataclasses import asdict
from pathlib import Path

from disentext import ExperimentConfig, build_model, build_vocab, generate_synthetic, train

RUNS = (("none", 0), ("modcyc+gated", 0), ("none", 1), ("linear", 1), ("gated", 2))


def main():
    cfg = ExperimentConfig().with_overrides({"train_size": "600", "val_size": "200", "test_size": "100",
                                             "phase1_epochs": "3", "phase2_epochs": "3", "cycle_length": "3",
                                             "anneal_epochs": "2"})
    corpus = generate_synthetic(cfg.corpus_config())
    vocab = build_vocab(corpus)
    out = []
    for schedule, seed in RUNS:
        model = build_model(len(vocab), cfg.model_config(), seed)
        res = train(cfg.training_config(seed, schedule), corpus, model, vocab)
        recs = [asdict(r) for r in res.collapse.records]
        for r in recs:
            r.pop("flag")
        out.append({"schedule": schedule, "seed": seed, "records": recs})
    path = Path(__file__).with_name("trajectories.json")
    path.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
