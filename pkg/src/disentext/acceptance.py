"""One-command reproduction of the acceptance criteria with a pass/fail table.

Every CSV written here is a pure function of (config, seeds, code): timings
are printed but never written, so two runs can be compared byte for byte.
"""
from __future__ import annotations

import csv
import filecmp
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import oracles
from .config import ExperimentConfig
from .corpus import build_vocab, generate_synthetic
from .evaluation import LevelGrid, ablation_probe, accuracy_suite, level_sweep, sentiment_range, train_classifier
from .flow import IdentityFlow
from .model import save_checkpoint
from .training import build_model, train

logger = logging.getLogger(__name__)

CSV_FILES = ("oracles.csv", "ab_collapse.csv", "control.csv", "sweep.csv", "probes.csv", "criteria.csv")
SABOTAGE = ("identity-flow",)
KL_FLOOR = 0.1


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class AcceptanceSummary:
    criteria: list = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def table(self) -> str:
        lines = [f"{'#':>2}  {'criterion':<28} {'result':<6}  detail"]
        for c in self.criteria:
            lines.append(f"{c.number:>2}  {c.name:<28} {'PASS' if c.passed else 'FAIL':<6}  {c.detail}")
        return "\n".join(lines)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


# ---------------------------------------------------------------------------
# criteria 1-4: oracle suites


def oracle_criteria() -> tuple[list[Criterion], list[dict]]:
    rows, out = [], []

    t = time.perf_counter()
    rt = oracles.flow_roundtrip_error()
    ld = oracles.flow_logdet_error()
    mass = oracles.flow_density_mass()
    secs = time.perf_counter() - t
    rows += [{"check": "flow_roundtrip_max_abs", "value": rt, "limit": 1e-5},
             {"check": "flow_logdet_rel", "value": ld, "limit": 1e-4},
             {"check": "flow_mass_abs_gap", "value": abs(mass - 1), "limit": 0.01}]
    ok = rt <= 1e-5 and ld <= 1e-4 and abs(mass - 1) <= 0.01 and secs < 60
    out.append(Criterion(1, "flow oracles", ok,
                         f"roundtrip={rt:.2e} logdet_rel={ld:.2e} mass={mass:.5f} ({secs:.1f}s)", secs))

    t = time.perf_counter()
    g = oracles.gradient_errors()
    secs = time.perf_counter() - t
    for k, v in g.items():
        rows.append({"check": f"grad_{k}", "value": v, "limit": 1e-3 if k.endswith("32") else 1e-6})
    ok = all(v <= (1e-3 if k.endswith("32") else 1e-6) for k, v in g.items()) and secs < 120
    out.append(Criterion(2, "gradient suite", ok,
                         " ".join(f"{k}={v:.1e}" for k, v in g.items()) + f" ({secs:.1f}s)", secs))

    t = time.perf_counter()
    gaps = {"kl_pair": oracles.kl_mc_gap(), "kl_prior": oracles.standard_normal_kl_mc_gap(),
            "kl_factorized": oracles.factorized_kl_mc_gap()}
    mc = oracles.modcyc_checks()
    ok = all(mc.values())
    for k, (closed, est, se) in gaps.items():
        z = abs(closed - est) / se
        rows.append({"check": f"{k}_z", "value": z, "limit": 3.0})
        ok = ok and z <= 3.0
    for k, v in mc.items():
        rows.append({"check": f"modcyc_{k}", "value": float(v), "limit": 1.0})
    secs = time.perf_counter() - t
    zs = " ".join(f"{k}={abs(c - e) / s:.2f}se" for k, (c, e, s) in gaps.items())
    out.append(Criterion(3, "closed forms", ok, f"{zs} modcyc={'ok' if all(mc.values()) else 'bad'}", secs))

    t = time.perf_counter()
    plans = oracles.plan_table()
    iso = oracles.isolation_deltas()
    secs = time.perf_counter() - t
    for p in plans:
        rows.append({"check": f"plan_N{p['layers']}_{p['converged']}", "value": float(p["match"]), "limit": 1.0})
    for r in iso:
        rows.append({"check": f"isolation_{r['step']}", "value": float(r["ok"]), "limit": 1.0})
    ok = all(p["match"] for p in plans) and all(r["ok"] for r in iso)
    out.append(Criterion(4, "controller", ok,
                         f"plans {sum(p['match'] for p in plans)}/{len(plans)}, "
                         f"isolated sub-steps {sum(r['ok'] for r in iso)}/{len(iso)}", secs))
    return out, rows


# ---------------------------------------------------------------------------
# criteria 5-7: trained models


def _sabotage(model, kind: str | None):
    if kind is None:
        return model
    if kind == "identity-flow":
        model.flow = IdentityFlow(model.latent_dim)
        return model
    raise ValueError(f"unknown sabotage {kind!r}; expected one of {SABOTAGE}")


def _run_summary(result, schedule: str, seed: int) -> dict:
    recs = result.metrics.records
    kls = [r["val_kl"] for r in recs]
    return {"seed": seed, "schedule": schedule, "epochs": len(recs),
            "final_mi": recs[-1]["val_mi"] if recs else float("nan"),
            "min_kl": min(kls) if kls else float("nan"),
            "final_kl": kls[-1] if kls else float("nan"),
            "collapsed_epochs": sum(bool(r["collapsed"]) for r in recs)}


def reproduce_acceptance(cfg: ExperimentConfig | None = None, out_dir=None, sabotage: str | None = None,
                         echo=print) -> AcceptanceSummary:
    cfg = cfg or ExperimentConfig()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
    torch.set_num_threads(1)
    summary = AcceptanceSummary(out_dir=out)

    crit, oracle_rows = oracle_criteria()
    summary.criteria += crit
    for c in crit:
        echo(f"[{c.number}] {c.name}: {'PASS' if c.passed else 'FAIL'}  {c.detail}")

    corpus = generate_synthetic(cfg.corpus_config())
    vocab = build_vocab(corpus, cfg.min_freq, cfg.max_vocab)

    # 5: paired collapse experiment
    t = time.perf_counter()
    ab_rows, models = [], {}
    for seed in cfg.seeds:
        for schedule in (cfg.schedule, "none"):
            model = build_model(len(vocab), cfg.model_config(), seed)
            res = train(cfg.training_config(seed, schedule), corpus, model, vocab)
            ab_rows.append(_run_summary(res, schedule, seed))
            if schedule == cfg.schedule:
                models[seed] = res.model
                if out:
                    save_checkpoint(out / "checkpoints" / f"seed{seed}.npz", res.model, vocab, cfg.digest(),
                                    {"seed": seed, "schedule": schedule})
            echo(f"    trained seed={seed} schedule={schedule}: final MI={ab_rows[-1]['final_mi']:.3f} "
                 f"min KL={ab_rows[-1]['min_kl']:.3f}")
    secs = time.perf_counter() - t
    wins = 0
    for seed in cfg.seeds:
        s = next(r for r in ab_rows if r["seed"] == seed and r["schedule"] == cfg.schedule)
        c = next(r for r in ab_rows if r["seed"] == seed and r["schedule"] == "none")
        ok = s["final_mi"] > c["final_mi"] and c["min_kl"] < KL_FLOOR and s["min_kl"] > KL_FLOOR
        s["pair_pass"] = c["pair_pass"] = ok
        wins += ok
    need = math.ceil(2 * len(cfg.seeds) / 3)
    summary.criteria.append(Criterion(5, "collapse A/B", wins >= need and secs <= 900,
                                      f"{wins}/{len(cfg.seeds)} paired seeds ({secs:.0f}s train)", secs))
    echo(f"[5] collapse A/B: {'PASS' if summary.criteria[-1].passed else 'FAIL'}  {summary.criteria[-1].detail}")

    # 6: control suite
    t = time.perf_counter()
    clf = train_classifier(corpus, vocab, seed=cfg.classifier_seed, epochs=cfg.classifier_epochs)
    control_rows = []
    for seed, model in models.items():
        model = _sabotage(model, sabotage)
        rng = sentiment_range(model, corpus.train, vocab, cfg.range_percentile or None)
        acc = accuracy_suite(model, clf, corpus, vocab, n_per_class=cfg.n_per_class, seed=cfg.eval_seed,
                             f_range=rng)
        control_rows.append({"seed": seed, "classifier_acc": clf.heldout_accuracy,
                             "controlled_generation": acc.controlled_generation, "transfer": acc.transfer,
                             "f_min": acc.f_min, "f_max": acc.f_max})
    gen_med = statistics.median(r["controlled_generation"] for r in control_rows)
    tr_med = statistics.median(r["transfer"] for r in control_rows)
    ok = clf.heldout_accuracy >= 0.95 and gen_med >= 0.85 and tr_med >= 0.80
    summary.criteria.append(Criterion(6, "control suite", ok,
                                      f"classifier={clf.heldout_accuracy:.3f} generation={gen_med:.3f} "
                                      f"transfer={tr_med:.3f} (median of {len(control_rows)})",
                                      time.perf_counter() - t))
    echo(f"[6] control suite: {'PASS' if ok else 'FAIL'}  {summary.criteria[-1].detail}")

    # 7: sweep and ablation on the first seed's model
    t = time.perf_counter()
    model = models[cfg.seed]
    sources = corpus.test[:cfg.sweep_sources] if cfg.sweep_sources else corpus.test
    f_min, f_max = sentiment_range(model, corpus.train, vocab, cfg.range_percentile or None)
    sweep = level_sweep(model, clf, sources, vocab, LevelGrid(f_min, f_max, cfg.levels),
                        decode_mode=cfg.sweep_decode, samples_per_source=cfg.sweep_samples, seed=cfg.eval_seed)
    probe = ablation_probe(model, corpus, vocab)
    rho = sweep.spearman
    gap = probe.probe_za - probe.probe_other
    ok = rho is not None and rho >= 0.9 and probe.argmax_dim == probe.za_dim and gap >= 0.15
    summary.criteria.append(Criterion(7, "sweep and ablation", ok,
                                      f"spearman={'null' if rho is None else f'{rho:.3f}'} "
                                      f"argmax_dim={probe.argmax_dim}/{probe.za_dim} "
                                      f"probe z_a={probe.probe_za:.3f} other={probe.probe_other:.3f}",
                                      time.perf_counter() - t))
    echo(f"[7] sweep and ablation: {'PASS' if ok else 'FAIL'}  {summary.criteria[-1].detail}")

    sweep_rows = list(sweep.rows())
    probe_rows = [{"dim": j, "pearson": r, "zero_variance": z, "is_za": j == probe.za_dim}
                  for j, (r, z) in enumerate(zip(probe.correlations, probe.zero_variance))]
    probe_rows.append({"dim": "probe_za", "pearson": probe.probe_za, "zero_variance": False, "is_za": True})
    probe_rows.append({"dim": f"probe_other_{probe.best_other_dim}", "pearson": probe.probe_other,
                       "zero_variance": False, "is_za": False})
    if out:
        _write_csv(out / "oracles.csv", oracle_rows)
        _write_csv(out / "ab_collapse.csv", ab_rows)
        _write_csv(out / "control.csv", control_rows)
        _write_csv(out / "sweep.csv", sweep_rows)
        _write_csv(out / "probes.csv", probe_rows)
        _write_csv(out / "criteria.csv", [{"number": c.number, "name": c.name, "passed": c.passed}
                                          for c in summary.criteria])
    return summary


def compare_runs(a, b) -> tuple[bool, list[str]]:
    """Byte comparison of the acceptance CSVs in two output directories."""
    diffs = []
    for name in CSV_FILES:
        pa, pb = Path(a) / name, Path(b) / name
        if not (pa.exists() and pb.exists()) or not filecmp.cmp(pa, pb, shallow=False):
            diffs.append(name)
    return not diffs, diffs


def determinism_criterion(a, b) -> Criterion:
    same, diffs = compare_runs(a, b)
    return Criterion(8, "determinism", same, "identical CSVs" if same else f"differing: {', '.join(diffs)}")
