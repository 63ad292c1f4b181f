"""Sentiment-labelled sentences: synthesis, ingestion, tokenization, vocabulary.

Labels are dense integers: 0 = negative, 1 = positive and, for three-class
corpora, 2 = neutral.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, CorpusParseError, DomainError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

NEGATIVE, POSITIVE, NEUTRAL = 0, 1, 2

_TOKEN_RE = re.compile(r"<[a-z]+>|[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and detach punctuation."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    label: int
    raw_text: str

    def __post_init__(self):
        if not self.tokens:
            raise DomainError("sentence has no tokens")
        if self.label < 0:
            raise DomainError(f"negative label {self.label}")

    @classmethod
    def from_text(cls, text: str, label: int) -> "LabeledSentence":
        return cls(tuple(tokenize(text)), int(label), text)


@dataclass
class LabeledCorpus:
    train: list[LabeledSentence]
    val: list[LabeledSentence] = field(default_factory=list)
    test: list[LabeledSentence] = field(default_factory=list)
    num_classes: int = 2
    rejected: int = 0

    def splits(self) -> dict[str, list[LabeledSentence]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def __len__(self):
        return len(self.train) + len(self.val) + len(self.test)

    def all_sentences(self) -> list[LabeledSentence]:
        return self.train + self.val + self.test

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, sents in self.splits().items():
            write_jsonl(directory / f"{name}.jsonl", sents)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, sents in self.splits().items():
            h.update(name.encode())
            for s in sents:
                h.update(f"{s.label}\t{' '.join(s.tokens)}\n".encode())
        return h.hexdigest()[:16]


class Vocabulary:
    """Token <-> id map with reserved ids 0..3 for pad, bos, eos and unk."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                continue
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Sequence[str] | str) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokenize(tokens)
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i >= len(self.itos) or i < 0:
                raise DomainError(f"token id {i} outside vocabulary of size {len(self)}")
            if strip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    tok, idx = line.split("\t")
                    rows.append((int(idx), tok))
                except ValueError as exc:
                    raise CorpusParseError(f"bad vocabulary row {line!r}", n) from exc
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise CorpusParseError("vocabulary ids are not contiguous from 0")
        toks = [t for _, t in rows]
        if tuple(toks[:4]) != RESERVED:
            raise CorpusParseError("reserved tokens must occupy ids 0..3")
        return cls(toks[4:])


def build_vocab(corpus: LabeledCorpus | Sequence[LabeledSentence], min_freq: int = 1,
                max_size: int = 10_000) -> Vocabulary:
    """Frequency-sorted vocabulary (ties broken lexicographically), truncated to max_size.

    max_size counts the four reserved entries.
    """
    if max_size < 5:
        raise ConfigurationError(f"max_size must be >= 5, got {max_size}")
    sents = corpus.train if isinstance(corpus, LabeledCorpus) else list(corpus)
    if not sents:
        raise DomainError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for s in sents for t in s.tokens if t not in RESERVED)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(ranked[: max_size - len(RESERVED)])


# ---------------------------------------------------------------------------
# file formats


def write_jsonl(path, sentences: Iterable[LabeledSentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(json.dumps({"text": s.raw_text, "label": s.label}, sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[list[LabeledSentence], int]:
    """Parse one line-delimited file; returns (sentences, rejected_count).

    Undecodable lines and empty texts are skipped and counted. A record
    without a ``label`` field is a hard error.
    """
    sents, rejected = [], 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                rejected += 1
                continue
            if not isinstance(rec, dict):
                rejected += 1
                continue
            if "label" not in rec:
                raise CorpusParseError("record has no 'label' field", n)
            text = rec.get("text")
            if not isinstance(text, str) or not tokenize(text):
                rejected += 1
                continue
            try:
                label = int(rec["label"])
            except (TypeError, ValueError) as exc:
                raise CorpusParseError(f"label {rec['label']!r} is not an integer", n) from exc
            if label < 0:
                raise CorpusParseError(f"negative label {label}", n)
            sents.append(LabeledSentence.from_text(text, label))
    return sents, rejected


def load_corpus(path) -> LabeledCorpus:
    """Load a corpus from a ``.jsonl`` file or a directory of split files.

    A directory must hold ``train.jsonl`` and may hold ``val.jsonl`` and
    ``test.jsonl``. A single file becomes the train split.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    splits = {"train": [], "val": [], "test": []}
    rejected = 0
    if path.is_dir():
        if not (path / "train.jsonl").exists():
            raise FileNotFoundError(path / "train.jsonl")
        for name in splits:
            f = path / f"{name}.jsonl"
            if f.exists():
                splits[name], r = read_jsonl(f)
                rejected += r
    else:
        splits["train"], rejected = read_jsonl(path)
    if rejected:
        logger.warning("rejected %d malformed records while loading %s", rejected, path)
    labels = {s.label for v in splits.values() for s in v}
    num_classes = max(labels) + 1 if labels else 0
    return LabeledCorpus(num_classes=num_classes, rejected=rejected, **splits)


# ---------------------------------------------------------------------------
# synthetic template corpus

DEFAULT_TEMPLATES = (
    "the {N} was {A} .",
    "the {N} was {ADV} {A} .",
    "the {N} and the {N2} were {A} .",
    "we {V} the {N} and the {N2} {TIME} .",
    "i {V} the {N} here .",
    "{A} {N} and {A2} {N2} .",
    "the {N} here is {ADV} {A} , the {N2} too .",
    "our {N} {TIME} was {A} .",
    "i {V} the {N} , the {N2} was {A} .",
    "the {N} tasted {A} {TIME} .",
)

# Nouns within one sentence share a topic, which gives the latent code
# something worth encoding besides polarity.
DEFAULT_TOPICS = (
    ("pizza", "pasta", "bread", "sauce", "salad", "soup"),
    ("coffee", "tea", "wine", "beer", "dessert", "cake"),
    ("steak", "burger", "fries", "chicken", "sushi", "portion"),
    ("service", "staff", "waiter", "bartender", "owner", "manager"),
    ("room", "decor", "music", "view", "location", "parking"),
)

DEFAULT_ADJECTIVES = {
    NEGATIVE: ("terrible", "bad", "awful", "horrible", "bland", "rude", "disappointing",
               "mediocre", "cold", "stale", "greasy", "overpriced"),
    POSITIVE: ("great", "good", "excellent", "amazing", "delicious", "friendly",
               "wonderful", "perfect", "fantastic", "tasty", "lovely", "superb"),
    NEUTRAL: ("okay", "average", "fine", "decent", "standard", "ordinary"),
}

DEFAULT_VERBS = {
    NEGATIVE: ("hated", "disliked", "loathed", "resented", "regretted"),
    POSITIVE: ("loved", "enjoyed", "liked", "adored", "praised"),
    NEUTRAL: ("tried", "ordered", "had"),
}

DEFAULT_ADVERBS = ("really", "very", "quite", "truly", "so", "pretty")
DEFAULT_TIMES = ("last night", "on friday", "for lunch", "for dinner", "with friends",
                 "this morning", "yesterday", "today")


@dataclass(frozen=True)
class CorpusConfig:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    topics: tuple[tuple[str, ...], ...] = DEFAULT_TOPICS
    adjectives: dict = field(default_factory=lambda: dict(DEFAULT_ADJECTIVES))
    verbs: dict = field(default_factory=lambda: dict(DEFAULT_VERBS))
    adverbs: tuple[str, ...] = DEFAULT_ADVERBS
    times: tuple[str, ...] = DEFAULT_TIMES
    num_classes: int = 2
    class_probs: tuple[float, ...] | None = None
    sizes: tuple[int, int, int] = (5000, 500, 500)
    max_len: int = 16
    seed: int = 7

    def probs(self) -> tuple[float, ...]:
        if self.class_probs is None:
            return tuple(1.0 / self.num_classes for _ in range(self.num_classes))
        return tuple(self.class_probs)

    def validate(self) -> None:
        if self.num_classes not in (2, 3):
            raise ConfigurationError("num_classes must be 2 or 3")
        if any(s <= 0 for s in self.sizes) or len(self.sizes) != 3:
            raise ConfigurationError(f"sizes must be three positive ints, got {self.sizes}")
        p = self.probs()
        if len(p) != self.num_classes or abs(sum(p) - 1.0) > 1e-9 or min(p) < 0:
            raise ConfigurationError(f"class_probs {p} must be {self.num_classes} values summing to 1")
        if not self.templates or not self.topics or not all(self.topics):
            raise ConfigurationError("grammar needs at least one template and one noun")
        for c in range(self.num_classes):
            adjs, verbs = self.adjectives.get(c), self.verbs.get(c)
            if not adjs and not verbs:
                raise ConfigurationError(f"class {c} has no polarity words")
            if not any(_fillable(t, adjs, verbs) for t in self.templates):
                raise ConfigurationError(f"no template can be filled for class {c}")
        polarity = [set(self.adjectives.get(c, ())) | set(self.verbs.get(c, ()))
                    for c in range(self.num_classes)]
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if polarity[a] & polarity[b]:
                    raise ConfigurationError(f"polarity words shared by classes {a} and {b}")


def _fillable(template: str, adjs, verbs) -> bool:
    if ("{A}" in template or "{A2}" in template) and not adjs:
        return False
    # a template without polarity slots would produce an unlabelable sentence
    has_slot = any(s in template for s in ("{A}", "{A2}", "{V}"))
    return has_slot and not ("{V}" in template and not verbs)


def _fill(template: str, label: int, cfg: CorpusConfig, rng: random.Random) -> str | None:
    adjs, verbs = cfg.adjectives.get(label, ()), cfg.verbs.get(label, ())
    if not _fillable(template, adjs, verbs):
        return None
    topic = rng.choice(cfg.topics)
    n1 = rng.choice(topic)
    others = [n for n in topic if n != n1] or [n1]
    slots = {
        "N": n1,
        "N2": rng.choice(others),
        "A": rng.choice(adjs) if adjs else "",
        "A2": rng.choice(adjs) if adjs else "",
        "V": rng.choice(verbs) if verbs else "",
        "ADV": rng.choice(cfg.adverbs) if cfg.adverbs else "",
        "TIME": rng.choice(cfg.times) if cfg.times else "",
    }
    return " ".join(template.format(**slots).split())


def generate_synthetic(config: CorpusConfig = CorpusConfig()) -> LabeledCorpus:
    """Sample a template corpus; deterministic in ``config.seed``.

    Sentences are unique across the three splits. Class counts per split are
    fixed by rounding ``size * p_c``, so balance is exact up to rounding.
    """
    config.validate()
    rng = random.Random(config.seed)
    seen: set[str] = set()
    probs = config.probs()
    splits = []
    for size in config.sizes:
        counts = [int(round(size * p)) for p in probs]
        counts[-1] += size - sum(counts)
        order = [c for c, n in enumerate(counts) for _ in range(n)]
        rng.shuffle(order)
        out = []
        for label in order:
            for _ in range(10_000):
                text = _fill(rng.choice(config.templates), label, config, rng)
                if text is None or text in seen:
                    continue
                if len(tokenize(text)) > config.max_len:
                    continue
                break
            else:
                raise ConfigurationError("grammar too small to produce enough unique sentences")
            seen.add(text)
            out.append(LabeledSentence.from_text(text, label))
        splits.append(out)
    train, val, test = splits
    return LabeledCorpus(train, val, test, num_classes=config.num_classes)


def polarity_words(config: CorpusConfig = CorpusConfig()) -> dict[int, set[str]]:
    return {c: set(config.adjectives.get(c, ())) | set(config.verbs.get(c, ()))
            for c in range(config.num_classes)}


def label_from_words(tokens: Sequence[str], config: CorpusConfig = CorpusConfig()) -> int | None:
    """Recover a synthetic sentence's label from its polarity words (None if ambiguous)."""
    hits = {c for c, words in polarity_words(config).items() if words.intersection(tokens)}
    return hits.pop() if len(hits) == 1 else None


def shuffled_labels(corpus: LabeledCorpus, seed: int = 0) -> LabeledCorpus:
    """Copy of ``corpus`` whose labels are permuted within each split."""
    rng = random.Random(seed)
    out = {}
    for name, sents in corpus.splits().items():
        labels = [s.label for s in sents]
        rng.shuffle(labels)
        out[name] = [LabeledSentence(s.tokens, y, s.raw_text) for s, y in zip(sents, labels)]
    return LabeledCorpus(num_classes=corpus.num_classes, **out)
