"""Padding sentences into tensors and iterating minibatches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .corpus import PAD_ID, LabeledSentence, Vocabulary


@dataclass
class Batch:
    ids: torch.Tensor       # (B, L) padded with PAD_ID, no BOS/EOS
    lengths: torch.Tensor   # (B,)
    labels: torch.Tensor    # (B,)

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        lengths = self.lengths[idx]
        return Batch(self.ids[idx, : int(lengths.max())], lengths, self.labels[idx])


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    ids = torch.full((len(seqs), max(int(lengths.max()), 1)), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, lengths


def make_batch(sentences: Sequence[LabeledSentence], vocab: Vocabulary, max_len: int | None = None) -> Batch:
    seqs = [vocab.encode(s.tokens)[:max_len] for s in sentences]
    ids, lengths = pad_ids(seqs)
    labels = torch.tensor([s.label for s in sentences], dtype=torch.long)
    return Batch(ids, lengths, labels)


def iterate_batches(sentences: Sequence[LabeledSentence], vocab: Vocabulary, batch_size: int,
                    rng: np.random.Generator | None = None, max_len: int | None = None,
                    drop_last: bool = False) -> Iterator[Batch]:
    order = np.arange(len(sentences))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield make_batch([sentences[i] for i in idx], vocab, max_len)
