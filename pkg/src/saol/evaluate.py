"""Translation quality measurement.

Corpus BLEU with multi-bleu semantics (corpus-level clipped n-gram
precisions up to 4-grams, geometric mean, brevity penalty, no
smoothing), paired bootstrap resampling for significance, and
frequency-binned token precision/recall/F1.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .bpe import SPECIALS, Vocabulary
from .errors import ArgumentError

MAX_NGRAM = 4


@dataclass
class BleuReport:
    bleu: float                # percentage in [0, 100]
    precisions: list           # p1..p4
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _sentence_stats(hyp_tokens, ref_tokens) -> np.ndarray:
    """[match_1..4, total_1..4, hyp_len, ref_len] for one sentence."""
    stats = np.zeros(2 * MAX_NGRAM + 2, dtype=np.int64)
    for n in range(1, MAX_NGRAM + 1):
        hyp_counts = _ngram_counts(hyp_tokens, n)
        ref_counts = _ngram_counts(ref_tokens, n)
        match = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        stats[n - 1] = match
        stats[MAX_NGRAM + n - 1] = max(len(hyp_tokens) - n + 1, 0)
    stats[-2] = len(hyp_tokens)
    stats[-1] = len(ref_tokens)
    return stats


def _bleu_from_stats(stats: np.ndarray) -> BleuReport:
    matches = stats[:MAX_NGRAM]
    totals = stats[MAX_NGRAM:2 * MAX_NGRAM]
    hyp_len = int(stats[-2])
    ref_len = int(stats[-1])
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_NGRAM) * 100.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


def corpus_stats(hypotheses, references) -> np.ndarray:
    """Per-sentence sufficient statistics, one row per aligned pair."""
    if len(hypotheses) != len(references):
        raise ArgumentError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ArgumentError("empty corpus")
    return np.stack([
        _sentence_stats(h.split(), r.split())
        for h, r in zip(hypotheses, references)
    ])


def corpus_bleu(hypotheses, references) -> BleuReport:
    """Corpus-level BLEU over whitespace-tokenized aligned line lists."""
    return _bleu_from_stats(corpus_stats(hypotheses, references).sum(axis=0))


@dataclass
class SignificanceReport:
    p_value: float
    resamples: int
    wins_a: int
    wins_b: int
    ties: int
    delta: float               # observed BLEU(a) - BLEU(b)


def paired_bootstrap(hyp_a, hyp_b, references, resamples: int = 1000,
                     rng: np.random.Generator | None = None) -> SignificanceReport:
    """Paired bootstrap resampling over sentences.

    Each resample draws len(corpus) sentence indices with replacement
    and scores both systems on them. Ties count as wins for neither
    system; p = 1 - max(win share), so a system against itself yields
    p = 1.0.
    """
    if resamples < 100:
        raise ArgumentError(f"resamples must be >= 100, got {resamples}")
    if rng is None:
        rng = np.random.default_rng(0)
    stats_a = corpus_stats(hyp_a, references)
    stats_b = corpus_stats(hyp_b, references)
    n = stats_a.shape[0]
    delta = corpus_bleu(hyp_a, references).bleu - corpus_bleu(hyp_b, references).bleu
    wins_a = wins_b = ties = 0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        bleu_a = _bleu_from_stats(stats_a[idx].sum(axis=0)).bleu
        bleu_b = _bleu_from_stats(stats_b[idx].sum(axis=0)).bleu
        if bleu_a > bleu_b:
            wins_a += 1
        elif bleu_b > bleu_a:
            wins_b += 1
        else:
            ties += 1
    p = 1.0 - max(wins_a, wins_b) / resamples
    return SignificanceReport(p, resamples, wins_a, wins_b, ties, delta)


@dataclass
class BinScores:
    """Token precision/recall/F1 for one frequency bin.

    A metric is None (absent) when its denominator bin is empty:
    precision without hypothesis tokens, recall without reference
    tokens, F1 when either side is absent.
    """

    precision: float | None
    recall: float | None
    f1: float | None
    support: int               # reference token occurrences in the bin


@dataclass
class BinnedReport:
    high: BinScores
    medium: BinScores
    low: BinScores

    def bins(self):
        return {"high": self.high, "medium": self.medium, "low": self.low}


def binned_scores(hypotheses, references, bins, vocab: Vocabulary) -> BinnedReport:
    """Frequency-binned token precision/recall/F1.

    `bins` is the (high, medium, low) index-set triple from
    bpe.frequency_bins. Matching is per-sentence multiset intersection;
    tokens outside every bin (specials, OOV) are ignored.
    """
    if len(hypotheses) != len(references):
        raise ArgumentError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    names = ("high", "medium", "low")
    token_bins = [{vocab.tokens[i] for i in b} for b in bins]
    matched = [0, 0, 0]
    hyp_totals = [0, 0, 0]
    ref_totals = [0, 0, 0]
    for hyp, ref in zip(hypotheses, references):
        hyp_counts = Counter(hyp.split())
        ref_counts = Counter(ref.split())
        for k, bin_tokens in enumerate(token_bins):
            for tok, c in hyp_counts.items():
                if tok in bin_tokens:
                    hyp_totals[k] += c
                    matched[k] += min(c, ref_counts[tok])
            for tok, c in ref_counts.items():
                if tok in bin_tokens:
                    ref_totals[k] += c
    scores = {}
    for k, name in enumerate(names):
        precision = matched[k] / hyp_totals[k] if hyp_totals[k] > 0 else None
        recall = matched[k] / ref_totals[k] if ref_totals[k] > 0 else None
        if precision is None or recall is None:
            f1 = None
        elif precision + recall == 0.0:
            f1 = 0.0
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        scores[name] = BinScores(precision, recall, f1, ref_totals[k])
    return BinnedReport(**scores)


# ---------------------------------------------------------------------------
# Report rendering (tab-separated, one "metric<tab>value" line each)
# ---------------------------------------------------------------------------

def format_bleu_report(report: BleuReport) -> str:
    lines = [
        f"bleu\t{report.bleu:.4f}",
        f"precisions\t{'/'.join(f'{p:.4f}' for p in report.precisions)}",
        f"brevity_penalty\t{report.brevity_penalty:.4f}",
        f"hyp_len\t{report.hyp_len}",
        f"ref_len\t{report.ref_len}",
    ]
    return "\n".join(lines)


def format_significance_report(report: SignificanceReport) -> str:
    lines = [
        f"p_value\t{report.p_value:.4f}",
        f"resamples\t{report.resamples}",
        f"wins_a\t{report.wins_a}",
        f"wins_b\t{report.wins_b}",
        f"ties\t{report.ties}",
        f"delta\t{report.delta:.4f}",
    ]
    return "\n".join(lines)


def format_binned_report(report: BinnedReport) -> str:
    def fmt(x):
        return "absent" if x is None else f"{x:.4f}"

    lines = ["bin\tprecision\trecall\tf1\tsupport"]
    for name, s in report.bins().items():
        lines.append(f"{name}\t{fmt(s.precision)}\t{fmt(s.recall)}\t{fmt(s.f1)}\t{s.support}")
    return "\n".join(lines)
