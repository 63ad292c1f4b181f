"""Command-line entry point: ``disentext <command> [options]``.

Exit status: 0 success, 1 usage or configuration error, 2 runtime error,
3 acceptance failure. Output directories default to ``$DISENTEXT_OUT/<command>``
(``./runs`` when the variable is unset).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__ as VERSION
from . import config as config_mod
from .acceptance import SABOTAGE, determinism_criterion, reproduce_acceptance
from .corpus import (NEGATIVE, POSITIVE, LabeledCorpus, LabeledSentence, build_vocab, generate_synthetic,
                     load_corpus, read_jsonl)
from .errors import CheckpointError, ConfigurationError, CorpusParseError, DomainError, NumericError
from .evaluation import (LevelGrid, ablation_probe, accuracy_suite, controlled_generate, level_sweep,
                         sentiment_range, train_classifier, transfer_batch)
from .model import load_checkpoint, read_manifest, save_checkpoint
from .training import build_model, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3
OUT_ENV = "DISENTEXT_OUT"

log = logging.getLogger("disentext")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# shared plumbing


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(args, command: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.profile(args.profile)
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.with_overrides(overrides) if overrides else cfg


def write_manifest(out: Path, command: str, cfg, **hashes) -> None:
    cfg.save(out / "config.txt")
    manifest = {"command": command, "version": VERSION, "config_hash": cfg.digest()}
    manifest.update(hashes)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def corpus_for(args, cfg) -> LabeledCorpus:
    if getattr(args, "corpus", None):
        return load_corpus(args.corpus)
    return generate_synthetic(cfg.corpus_config())


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    model, vocab, manifest = load_checkpoint(path)
    model.eval()
    return model, vocab, manifest


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        names = list(dict.fromkeys(k for r in rows for k in r))
        w = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def target_level(args, model, corpus, vocab) -> float:
    if args.level is not None:
        return float(args.level)
    f_min, f_max = sentiment_range(model, corpus.train, vocab)
    return f_max if args.polarity == "pos" else f_min


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg = cfg.with_overrides({"corpus_seed": str(args.seed)})
    out = resolve_out(args, "synth")
    corpus = generate_synthetic(cfg.corpus_config())
    corpus.save(out)
    vocab = build_vocab(corpus, cfg.min_freq, cfg.max_vocab)
    vocab.save(out / "vocab.tsv")
    write_manifest(out, "synth", cfg, corpus_hash=corpus.digest(), vocab_hash=vocab.digest())
    print(f"wrote {sum(len(s) for s in corpus.splits().values())} sentences, vocabulary {len(vocab)} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    over = {}
    if args.schedule:
        over["schedule"] = args.schedule
    if args.epochs is not None:
        over["phase1_epochs"] = over["phase2_epochs"] = str(args.epochs)
    if args.seed is not None:
        over["seeds"] = str(args.seed)
    cfg = cfg.with_overrides(over) if over else cfg
    out = resolve_out(args, "train")
    corpus = corpus_for(args, cfg)
    vocab = build_vocab(corpus, cfg.min_freq, cfg.max_vocab)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(ckpt_dir / ".lock"), timeout=0):
            if args.resume:
                stored = read_manifest(args.resume)
                if stored.get("config_hash") != cfg.digest():
                    raise CheckpointError(f"refusing to resume from {args.resume}: config hash "
                                          f"{stored.get('config_hash')} != {cfg.digest()}")
            model = build_model(len(vocab), cfg.model_config(), cfg.seed)
            res = train(cfg.training_config(), corpus, model, vocab, metrics_path=out / "metrics.jsonl",
                        checkpoint_dir=ckpt_dir, config_hash=cfg.digest(), resume=args.resume)
            save_checkpoint(ckpt_dir / "last.npz", res.model, vocab, cfg.digest(),
                            {"epoch": len(res.metrics) + _resumed_epochs(args), "final": True})
    except Timeout:
        raise CheckpointError(f"checkpoint directory {ckpt_dir} is locked by another run")
    rows = [{k: v for k, v in r.items() if not isinstance(v, (dict, list)) and k != "wall_clock"}
            for r in res.metrics.records]
    write_csv(out / "metrics.csv", rows)
    res.collapse.to_jsonl(out / "collapse.jsonl")
    write_manifest(out, "train", cfg, corpus_hash=corpus.digest(), vocab_hash=vocab.digest(),
                   dims_hash=cfg.model_config().digest(), optimizer_steps=res.optimizer_steps,
                   epochs=len(res.metrics))
    print(f"trained {len(res.metrics)} epochs, {res.optimizer_steps} optimizer steps -> {ckpt_dir / 'last.npz'}")
    return EXIT_OK


def _resumed_epochs(args) -> int:
    if not args.resume:
        return 0
    return int(read_manifest(args.resume)["extra"].get("epoch", 0))


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    model, vocab, manifest = load_model(args.checkpoint)
    corpus = corpus_for(args, cfg) if args.level is None else None
    level = target_level(args, model, corpus, vocab)
    gens = controlled_generate(model, level, args.n, seed=args.seed, mode=args.mode, temperature=args.temperature)
    out = resolve_out(args, "generate")
    with open(out / "generations.jsonl", "w", encoding="utf-8") as fh:
        for g in gens:
            text = vocab.decode(g.ids)
            fh.write(json.dumps({"text": text, "level": g.level, "seed": g.seed, "empty": g.empty}) + "\n")
            print(text)
    write_manifest(out, "generate", cfg, checkpoint=str(args.checkpoint), dims_hash=manifest["dims_hash"],
                   vocab_hash=manifest["vocab_hash"], level=level)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = resolve_config(args)
    model, vocab, manifest = load_model(args.checkpoint)
    sentences = [LabeledSentence.from_text(t, 0) for t in args.text or ()]
    if args.input:
        sents, _ = read_jsonl(args.input)
        sentences += sents
    if not sentences:
        raise UsageError("give --text or --input")
    corpus = corpus_for(args, cfg) if args.level is None else None
    level = target_level(args, model, corpus, vocab)
    outs = transfer_batch(model, sentences, vocab, torch.full((len(sentences),), level))
    out = resolve_out(args, "transfer")
    with open(out / "transfers.jsonl", "w", encoding="utf-8") as fh:
        for s, o in zip(sentences, outs):
            text = vocab.decode(o)
            fh.write(json.dumps({"source": s.raw_text, "text": text, "level": level}) + "\n")
            print(f"{s.raw_text} -> {text}")
    write_manifest(out, "transfer", cfg, checkpoint=str(args.checkpoint), dims_hash=manifest["dims_hash"],
                   vocab_hash=manifest["vocab_hash"], level=level)
    return EXIT_OK


def _eval_setup(args):
    cfg = resolve_config(args)
    model, vocab, manifest = load_model(args.checkpoint)
    corpus = corpus_for(args, cfg)
    if build_vocab(corpus, cfg.min_freq, cfg.max_vocab).digest() != manifest["vocab_hash"]:
        log.warning("corpus vocabulary differs from the checkpoint's; unseen words map to <unk>")
    clf = train_classifier(corpus, vocab, seed=cfg.classifier_seed, epochs=cfg.classifier_epochs)
    return cfg, model, vocab, manifest, corpus, clf


def cmd_sweep(args) -> int:
    cfg, model, vocab, manifest, corpus, clf = _eval_setup(args)
    f_min, f_max = sentiment_range(model, corpus.train, vocab, cfg.range_percentile or None)
    sources = corpus.test[:cfg.sweep_sources] if cfg.sweep_sources else corpus.test
    rep = level_sweep(model, clf, sources, vocab, LevelGrid(f_min, f_max, cfg.levels),
                      decode_mode=cfg.sweep_decode, samples_per_source=cfg.sweep_samples, seed=cfg.eval_seed)
    out = resolve_out(args, "sweep")
    write_csv(out / "sweep.csv", list(rep.rows()))
    write_manifest(out, "sweep", cfg, checkpoint=str(args.checkpoint), dims_hash=manifest["dims_hash"],
                   vocab_hash=manifest["vocab_hash"], corpus_hash=corpus.digest(),
                   classifier_hash=clf.weights_digest(), spearman=rep.spearman)
    print(f"spearman(level, mean score) = {rep.spearman}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, model, vocab, manifest, corpus, clf = _eval_setup(args)
    f_range = sentiment_range(model, corpus.train, vocab, cfg.range_percentile or None)
    acc = accuracy_suite(model, clf, corpus, vocab, n_per_class=cfg.n_per_class, seed=cfg.eval_seed,
                         f_range=f_range)
    out = resolve_out(args, "evaluate")
    with open(out / "generations.jsonl", "w", encoding="utf-8") as fh:
        for label, level, seed in ((POSITIVE, acc.f_max, cfg.eval_seed), (NEGATIVE, acc.f_min, cfg.eval_seed + 1)):
            gens = controlled_generate(model, level, cfg.n_per_class, seed=seed)
            preds = clf.predict([g.ids for g in gens])
            for g, p in zip(gens, preds):
                fh.write(json.dumps({"target": label, "predicted": int(p), "text": vocab.decode(g.ids),
                                     "empty": g.empty}) + "\n")
    row = {"classifier_acc": clf.heldout_accuracy, "controlled_generation": acc.controlled_generation,
           "transfer": acc.transfer, "n_generated": acc.n_generated, "n_transferred": acc.n_transferred,
           "f_min": acc.f_min, "f_max": acc.f_max, "empty_generations": acc.empty_generations}
    for ds, vals in acc.reference.items():
        for k, v in vals.items():
            row[f"reference_{ds}_{k}"] = v
    write_csv(out / "accuracy.csv", [row])
    write_manifest(out, "evaluate", cfg, checkpoint=str(args.checkpoint), dims_hash=manifest["dims_hash"],
                   vocab_hash=manifest["vocab_hash"], corpus_hash=corpus.digest(),
                   classifier_hash=clf.weights_digest())
    print(f"controlled generation {acc.controlled_generation:.3f}, transfer {acc.transfer:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    model, vocab, manifest = load_model(args.checkpoint)
    corpus = corpus_for(args, cfg)
    rep = ablation_probe(model, corpus, vocab)
    rows = [{"dim": j, "pearson": r, "zero_variance": z} for j, (r, z) in
            enumerate(zip(rep.correlations, rep.zero_variance))]
    out = resolve_out(args, "ablate")
    write_csv(out / "probes.csv", rows)
    write_csv(out / "probe_summary.csv", [{"argmax_dim": rep.argmax_dim, "za_dim": rep.za_dim,
                                           "probe_za": rep.probe_za, "best_other_dim": rep.best_other_dim,
                                           "probe_other": rep.probe_other}])
    write_manifest(out, "ablate", cfg, checkpoint=str(args.checkpoint), dims_hash=manifest["dims_hash"],
                   vocab_hash=manifest["vocab_hash"], corpus_hash=corpus.digest())
    print(f"argmax |rho| dim {rep.argmax_dim} (z_a is {rep.za_dim}); probe z_a {rep.probe_za:.3f} "
          f"vs best other {rep.probe_other:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    if not run.is_dir():
        raise CheckpointError(f"run directory not found: {run}")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    made, lines = [], [f"# Report for {run}", ""]
    for path in sorted(run.rglob("*.csv")):
        rows = read_csv(path)
        if not rows:
            continue
        stem = path.relative_to(run).as_posix().replace("/", "_")[:-4]
        fig = _plot(plt, path.name, rows)
        if fig is not None:
            target = out / f"{stem}.png"
            fig.savefig(target, dpi=100)
            plt.close(fig)
            made.append(target.name)
        lines.append(f"## {path.relative_to(run)}")
        lines.append("")
        lines.append("| " + " | ".join(rows[0]) + " |")
        lines.append("|" + "---|" * len(rows[0]))
        for r in rows[:40]:
            lines.append("| " + " | ".join(_short(v) for v in r.values()) + " |")
        lines.append("")
    if not made and len(lines) == 2:
        raise CheckpointError(f"no CSV files under {run}")
    (out / "summary.md").write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {len(made)} plots and summary.md -> {out}")
    return EXIT_OK


def _short(v: str) -> str:
    try:
        return f"{float(v):.4g}"
    except ValueError:
        return v


def _col(rows, key):
    return np.array([float(r[key]) for r in rows])


def _plot(plt, name: str, rows: list[dict]):
    keys = rows[0].keys()
    if name == "sweep.csv":
        fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
        lv = _col(rows, "level")
        for k, lab in (("mean_score_pos_source", "positive sources"), ("mean_score_neg_source", "negative sources"),
                       ("mean_score", "all")):
            a.plot(lv, _col(rows, k), marker="o", label=lab)
        a.set_xlabel("level")
        a.set_ylabel("mean positive probability")
        a.legend()
        for k, lab in (("mean_jaccard_pos", "positive sources"), ("mean_jaccard_neg", "negative sources")):
            b.plot(lv, _col(rows, k), marker="o", label=lab)
        b.set_xlabel("level")
        b.set_ylabel("mean Jaccard")
        b.legend()
        fig.tight_layout()
        return fig
    if name == "metrics.csv" and "val_kl" in keys:
        fig, ax = plt.subplots(figsize=(6, 4))
        ep = _col(rows, "epoch")
        ax.plot(ep, _col(rows, "val_kl"), label="KL")
        ax.plot(ep, _col(rows, "val_mi"), label="MI")
        ax.set_yscale("symlog", linthresh=0.1)
        ax.set_xlabel("epoch")
        ax.legend()
        fig.tight_layout()
        return fig
    if name == "ab_collapse.csv":
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = [f"{r['schedule']}\nseed {r['seed']}" for r in rows]
        ax.bar(range(len(rows)), _col(rows, "final_mi"))
        ax.set_xticks(range(len(rows)), labels, fontsize=7)
        ax.set_ylabel("final MI")
        fig.tight_layout()
        return fig
    if name == "probes.csv" and "pearson" in keys:
        dims = [r for r in rows if r["dim"].isdigit()]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar([int(r["dim"]) for r in dims], np.abs(_col(dims, "pearson")))
        ax.set_xlabel("dimension of z_f")
        ax.set_ylabel("|Pearson correlation with label|")
        fig.tight_layout()
        return fig
    return None


def cmd_acceptance(args) -> int:
    cfg = resolve_config(args)
    out = resolve_out(args, "acceptance")
    summary = reproduce_acceptance(cfg, out, sabotage=args.sabotage)
    crit = summary.criteria
    if args.compare:
        crit.append(determinism_criterion(out, args.compare))
    print()
    print(summary.table())
    write_manifest(out, "acceptance", cfg, sabotage=args.sabotage, passed=summary.passed)
    return EXIT_OK if summary.passed else EXIT_ACCEPTANCE


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disentext", description="Disentangled sentence VAE with sentiment control.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, corpus=False, checkpoint=False):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--profile", default="desk", choices=config_mod.PROFILES)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if corpus:
            sp.add_argument("--corpus", help="corpus file or directory (default: synthesize from config)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    s = sub.add_parser("synth", help="write the synthetic corpus")
    common(s)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    common(s, corpus=True)
    s.add_argument("--schedule", choices=("none", "linear", "modcyc", "gated", "modcyc+gated"))
    s.add_argument("--epochs", type=int, help="epochs for each of the two phases")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("generate", cmd_generate, "sample sentences at a sentiment level"),
                               ("transfer", cmd_transfer, "move sentences to a sentiment level")):
        s = sub.add_parser(name, help=helptext)
        common(s, corpus=True, checkpoint=True)
        g = s.add_mutually_exclusive_group(required=True)
        g.add_argument("--level", type=float)
        g.add_argument("--polarity", choices=("pos", "neg"))
        s.set_defaults(fn=fn)
        if name == "generate":
            s.add_argument("--n", type=int, default=10)
            s.add_argument("--seed", type=int, default=0)
            s.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
            s.add_argument("--temperature", type=float, default=1.0)
        else:
            s.add_argument("--text", action="append")
            s.add_argument("--input", help="JSONL file of {text, label} records")

    for name, fn, helptext in (("sweep", cmd_sweep, "sentiment level sweep"),
                               ("evaluate", cmd_evaluate, "control accuracy"),
                               ("ablate", cmd_ablate, "per-dimension probes")):
        s = sub.add_parser(name, help=helptext)
        common(s, corpus=True, checkpoint=True)
        s.set_defaults(fn=fn)

    s = sub.add_parser("report", help="render CSVs into plots and a summary")
    s.add_argument("--run", required=True, help="directory holding CSVs from other commands")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("acceptance", help="reproduce the acceptance criteria")
    common(s)
    s.add_argument("--sabotage", choices=SABOTAGE)
    s.add_argument("--compare", help="earlier acceptance output directory to compare CSVs with")
    s.set_defaults(fn=cmd_acceptance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, CorpusParseError, DomainError, NumericError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
