"""Synthetic corpora for desk-scale experiments.

Three workloads: a copy task (sanity: every output layer must solve
it), a tag-translation task whose target tokens are lemma+tag
combinations with skewed frequencies (gives structure-aware layers
something to share), and a large-vocabulary throughput workload for
benchmarking negative sampling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import data, ndmath, seq2seq
from .bpe import SPECIALS, Vocabulary, build_vocab
from .seq2seq import AdamOptimizer, ModelConfig, Seq2SeqModel


@dataclass
class TaskData:
    train_pairs: list          # [(src_ids, tgt_ids)]
    dev_pairs: list
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary


def copy_task(n_train: int = 2000, n_dev: int = 200, n_tokens: int = 100,
              min_len: int = 3, max_len: int = 10, seed: int = 0) -> TaskData:
    """Sequences over `n_tokens` symbols; the target equals the source."""
    rng = ndmath.stream_rng(seed, "data")
    tokens = [f"w{i:03d}" for i in range(n_tokens)]

    def draw(n):
        pairs = []
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            seq = rng.integers(0, n_tokens, size=length)
            ids = [len(SPECIALS) + int(i) for i in seq]
            pairs.append((ids, list(ids)))
        return pairs

    train = draw(n_train)
    dev = draw(n_dev)
    lines = [[tokens[i - len(SPECIALS)] for i in src] for src, _ in train]
    vocab = build_vocab(lines)
    remap = _remap_pairs(train + dev, tokens, vocab)
    return TaskData(remap[:n_train], remap[n_train:], vocab, vocab)


def _remap_pairs(pairs, tokens, vocab):
    """Re-express index pairs in a built Vocabulary's index space."""
    table = {len(SPECIALS) + i: vocab.to_id(t) for i, t in enumerate(tokens)}
    return [([table[i] for i in s], [table[i] for i in t]) for s, t in pairs]


def tag_task(n_lemmas: int = 30, n_tags: int = 10, n_train: int = 2500,
             n_dev: int = 400, forms_per_sentence: int = 2,
             seed: int = 0) -> TaskData:
    """Tag translation: source "lemma TAG" pairs, target inflected forms.

    Each target token is one (lemma, tag) combination, so target types
    share systematic structure. Training frequencies are doubly skewed
    (Zipf over lemmas and over tags), which produces natural high /
    medium / low frequency bins; the dev set draws combinations
    uniformly from those seen in training, so rare outputs carry real
    weight in evaluation.
    """
    rng = ndmath.stream_rng(seed, "data")
    lemma_p = 1.0 / np.arange(1, n_lemmas + 1) ** 1.1
    lemma_p /= lemma_p.sum()
    tag_p = 1.0 / np.arange(1, n_tags + 1) ** 0.9
    tag_p /= tag_p.sum()

    train_combos = []
    train_sents = []
    for _ in range(n_train):
        sent = []
        for _ in range(forms_per_sentence):
            l = int(rng.choice(n_lemmas, p=lemma_p))
            t = int(rng.choice(n_tags, p=tag_p))
            sent.append((l, t))
            train_combos.append((l, t))
        train_sents.append(sent)
    seen = sorted(set(train_combos))
    dev_sents = []
    for _ in range(n_dev):
        picks = rng.integers(0, len(seen), size=forms_per_sentence)
        dev_sents.append([seen[i] for i in picks])

    src_lines = []
    tgt_lines = []
    for sent in train_sents + dev_sents:
        src_lines.append(" ".join(f"l{l:02d} T{t}" for l, t in sent))
        tgt_lines.append(" ".join(f"f{l:02d}.{t}" for l, t in sent))
    src_vocab = build_vocab([s.split() for s in src_lines[:n_train]])
    tgt_vocab = build_vocab([s.split() for s in tgt_lines[:n_train]])
    src_ids = data.corpus_to_ids(src_lines, src_vocab)
    tgt_ids = data.corpus_to_ids(tgt_lines, tgt_vocab)
    pairs = list(zip(src_ids, tgt_ids))
    return TaskData(pairs[:n_train], pairs[n_train:], src_vocab, tgt_vocab)


def train_model(task: TaskData, config: ModelConfig, epochs: int,
                batch_size: int = 64, target_accuracy: float | None = None,
                max_decode_len: int = 16):
    """Train on a synthetic task; returns (model, accuracy history).

    Stops early once greedy dev token accuracy reaches
    `target_accuracy`, when given.
    """
    model = Seq2SeqModel(config)
    opt = AdamOptimizer(model.params)
    shuffle_rng = ndmath.stream_rng(config.seed, "shuffle")
    history = []
    for _ in range(epochs):
        batches = data.make_batches(task.train_pairs, batch_size, shuffle_rng)
        for batch in batches:
            seq2seq.train_step(model, batch, opt)
        acc = seq2seq.greedy_token_accuracy(model, task.dev_pairs, max_decode_len)
        history.append(acc)
        if target_accuracy is not None and acc >= target_accuracy:
            break
    return model, history


# ---------------------------------------------------------------------------
# Throughput benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    variant: str
    d_j: int
    sample_rate: float
    tokens_per_sec: float
    steps: int
    target_tokens: int


def bench_batches(vocab_size: int, n_batches: int, batch_size: int,
                  length: int, seed: int = 0) -> list:
    """Random index batches over a synthetic vocabulary."""
    rng = ndmath.stream_rng(seed, "data")
    pairs = []
    for _ in range(n_batches * batch_size):
        src = rng.integers(len(SPECIALS), vocab_size, size=length).tolist()
        tgt = rng.integers(len(SPECIALS), vocab_size, size=length).tolist()
        pairs.append((src, tgt))
    return data.make_batches(pairs, batch_size, rng=None, bucket=False)


def measure_throughput(config: ModelConfig, batches: list, warmup: int = 1,
                       steps: int = 2) -> BenchResult:
    """Tokens/sec of train_step on a warm-started fixed workload.

    The executed workload (steps, batches, updates) is deterministic;
    only the wall-clock reading varies between runs.
    """
    model = Seq2SeqModel(config)
    opt = AdamOptimizer(model.params)
    schedule = [batches[i % len(batches)] for i in range(warmup + steps)]
    for batch in schedule[:warmup]:
        seq2seq.train_step(model, batch, opt)
    tokens = 0
    start = time.perf_counter()
    for batch in schedule[warmup:]:
        seq2seq.train_step(model, batch, opt)
        tokens += batch.target_tokens
    elapsed = time.perf_counter() - start
    return BenchResult(config.variant.value, config.d_j, config.sample_rate,
                       tokens / elapsed if elapsed > 0 else float("inf"),
                       steps, tokens)
