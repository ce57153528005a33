"""Corpus-to-batch plumbing: index conversion, bucketing, padding."""

from __future__ import annotations

import numpy as np

from .bpe import BOS, EOS, PAD, Vocabulary
from .errors import ArgumentError
from .ndmath import DTYPE
from .seq2seq import Batch


def corpus_to_ids(lines, vocab: Vocabulary) -> list:
    """Whitespace-tokenized lines to index sequences (unk for OOV)."""
    return [vocab.to_ids(line.split()) for line in lines]


def filter_pairs(src_seqs, tgt_seqs, max_len: int):
    """Drop pairs whose source or target exceeds max_len tokens."""
    kept = [(s, t) for s, t in zip(src_seqs, tgt_seqs)
            if 1 <= len(s) <= max_len and 1 <= len(t) <= max_len]
    return kept


def make_batch(pairs) -> Batch:
    """Pad a list of (src_ids, tgt_ids) pairs into one Batch.

    Decoder inputs are bos + gold, prediction targets gold + eos.
    """
    if not pairs:
        raise ArgumentError("cannot build an empty batch")
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1  # +1 for the eos step
    src = np.full((B, S), PAD, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=DTYPE)
    tgt_in = np.full((B, T), PAD, dtype=np.int64)
    tgt_out = np.full((B, T), PAD, dtype=np.int64)
    tgt_mask = np.zeros((B, T), dtype=DTYPE)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        src_mask[i, :len(s)] = 1.0
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:len(t) + 1] = t
        tgt_out[i, :len(t)] = t
        tgt_out[i, len(t)] = EOS
        tgt_mask[i, :len(t) + 1] = 1.0
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)


def make_batches(pairs, batch_size: int, rng: np.random.Generator | None = None,
                 bucket: bool = True) -> list:
    """Chunk pairs into padded batches, bucketing by length.

    Bucketing sorts by (src length, tgt length) so batches waste little
    padding; batch order is then shuffled when an rng is supplied.
    Deterministic given the rng state.
    """
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(pairs)))
    if bucket:
        order.sort(key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        rng.shuffle(chunks)
    return [make_batch([pairs[i] for i in chunk]) for chunk in chunks]
