from collections import Counter

import numpy as np
import pytest

from saol import bpe, evaluate, ndmath
from saol.errors import ArgumentError


def random_corpus(rng, n_sentences, vocab, min_len=4, max_len=12):
    out = []
    for _ in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        out.append(" ".join(rng.choice(vocab, size=length)))
    return out


class TestCorpusBleu:
    def test_identity_is_100(self):
        refs = ["the cat sat on the mat", "a quick brown fox jumps"]
        report = evaluate.corpus_bleu(refs, refs)
        assert report.bleu == 100.0
        assert report.brevity_penalty == 1.0

    def test_clipping_hand_example(self):
        # p1 = 1/4 by clipping; no matching 2-gram zeroes the score.
        report = evaluate.corpus_bleu(["the the the the"], ["the cat sat down"])
        assert report.precisions[0] == 0.25
        assert report.bleu == 0.0

    def test_empty_hypothesis_line(self):
        report = evaluate.corpus_bleu(["", "the cat"], ["the dog", "the cat"])
        assert 0.0 <= report.bleu <= 100.0

    def test_all_empty_hypotheses(self):
        report = evaluate.corpus_bleu([""], ["the dog"])
        assert report.bleu == 0.0
        assert report.hyp_len == 0

    def test_brevity_penalty(self):
        # hyp shorter than ref: bp = exp(1 - r/c)
        report = evaluate.corpus_bleu(["the cat sat on"], ["the cat sat on mat x y z"])
        assert report.brevity_penalty == pytest.approx(np.exp(1 - 8 / 4))

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            evaluate.corpus_bleu(["a"], ["a", "b"])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        vocab = [f"w{i}" for i in range(30)]
        refs = random_corpus(rng, 20, vocab)
        hyps = random_corpus(rng, 20, vocab)
        base = evaluate.corpus_bleu(hyps, refs)
        order = rng.permutation(20)
        shuffled = evaluate.corpus_bleu([hyps[i] for i in order],
                                        [refs[i] for i in order])
        assert shuffled.bleu == base.bleu

    def test_bounded(self):
        rng = np.random.default_rng(4)
        vocab = [f"w{i}" for i in range(10)]
        for _ in range(20):
            refs = random_corpus(rng, 5, vocab)
            hyps = random_corpus(rng, 5, vocab)
            assert 0.0 <= evaluate.corpus_bleu(hyps, refs).bleu <= 100.0


class TestPairedBootstrap:
    def test_self_comparison_p_one(self):
        rng = np.random.default_rng(5)
        vocab = [f"w{i}" for i in range(20)]
        refs = random_corpus(rng, 10, vocab)
        hyps = random_corpus(rng, 10, vocab)
        report = evaluate.paired_bootstrap(hyps, hyps, refs, resamples=200,
                                           rng=ndmath.stream_rng(0, "bootstrap"))
        assert report.p_value == 1.0
        assert report.wins_a == report.wins_b == 0
        assert report.ties == 200

    def test_dominant_system_p_near_zero(self):
        refs = ["the cat sat on the mat today ok"] * 12
        hyp_a = list(refs)
        hyp_b = ["utterly wrong words here now indeed yes no"] * 12
        report = evaluate.paired_bootstrap(hyp_a, hyp_b, refs, resamples=300,
                                           rng=ndmath.stream_rng(1, "bootstrap"))
        assert report.p_value == 0.0
        assert report.wins_a == 300
        assert report.delta == pytest.approx(100.0)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(6)
        vocab = [f"w{i}" for i in range(15)]
        refs = random_corpus(rng, 8, vocab)
        a = random_corpus(rng, 8, vocab)
        b = random_corpus(rng, 8, vocab)
        r1 = evaluate.paired_bootstrap(a, b, refs, 150, ndmath.stream_rng(7, "bootstrap"))
        r2 = evaluate.paired_bootstrap(a, b, refs, 150, ndmath.stream_rng(7, "bootstrap"))
        assert (r1.p_value, r1.wins_a, r1.wins_b) == (r2.p_value, r2.wins_a, r2.wins_b)

    def test_too_few_resamples(self):
        with pytest.raises(ArgumentError):
            evaluate.paired_bootstrap(["a"], ["a"], ["a"], resamples=50)


def make_binned_fixture():
    # 9 tokens in three clean frequency tiers
    tokens = list(bpe.SPECIALS) + [f"t{i}" for i in range(9)]
    freqs = [0] * 4 + [90, 80, 70, 9, 8, 7, 3, 2, 1]
    vocab = bpe.Vocabulary(tokens, freqs)
    bins = bpe.frequency_bins(vocab)
    return vocab, bins


class TestBinnedScores:
    def test_identity_all_ones(self):
        vocab, bins = make_binned_fixture()
        refs = ["t0 t3 t6", "t1 t4 t7 t8"]
        report = evaluate.binned_scores(refs, refs, bins, vocab)
        for scores in report.bins().values():
            assert scores.precision == scores.recall == scores.f1 == 1.0

    def test_missing_low_bin_in_hyp(self):
        vocab, bins = make_binned_fixture()
        refs = ["t0 t6"]          # t6 is low bin
        hyps = ["t0 t1"]          # no low-bin tokens at all
        report = evaluate.binned_scores(hyps, refs, bins, vocab)
        assert report.low.recall == 0.0
        assert report.low.precision is None
        assert report.low.f1 is None
        assert report.low.support == 1

    def test_supports_cover_reference_tokens(self):
        vocab, bins = make_binned_fixture()
        rng = np.random.default_rng(8)
        tokens = [f"t{i}" for i in range(9)]
        refs = random_corpus(rng, 50, tokens)
        hyps = random_corpus(rng, 50, tokens)
        report = evaluate.binned_scores(hyps, refs, bins, vocab)
        total_ref = sum(len(r.split()) for r in refs)
        assert sum(s.support for s in report.bins().values()) == total_ref

    def test_matches_brute_force_counter(self):
        # independent oracle: per-sentence multiset intersection counts
        vocab, bins = make_binned_fixture()
        rng = np.random.default_rng(9)
        tokens = [f"t{i}" for i in range(9)]
        refs = random_corpus(rng, 50, tokens)
        hyps = random_corpus(rng, 50, tokens)
        report = evaluate.binned_scores(hyps, refs, bins, vocab)

        names = ("high", "medium", "low")
        bin_of = {}
        for name, idx_set in zip(names, bins):
            for i in idx_set:
                bin_of[vocab.tokens[i]] = name
        matched = Counter()
        hyp_tot = Counter()
        ref_tot = Counter()
        for h, r in zip(hyps, refs):
            hc, rc = Counter(h.split()), Counter(r.split())
            for tok in set(hc) | set(rc):
                name = bin_of[tok]
                matched[name] += min(hc[tok], rc[tok])
                hyp_tot[name] += hc[tok]
                ref_tot[name] += rc[tok]
        for name in names:
            scores = report.bins()[name]
            assert scores.precision == pytest.approx(matched[name] / hyp_tot[name])
            assert scores.recall == pytest.approx(matched[name] / ref_tot[name])
            assert scores.support == ref_tot[name]


class TestReportFormats:
    def test_bleu_report_is_tsv(self):
        report = evaluate.corpus_bleu(["a b c d"], ["a b c d"])
        text = evaluate.format_bleu_report(report)
        assert text.startswith("bleu\t100.0000")
        assert all("\t" in line for line in text.splitlines())

    def test_binned_report_marks_absent(self):
        vocab, bins = make_binned_fixture()
        report = evaluate.binned_scores(["t0"], ["t0 t6"], bins, vocab)
        assert "absent" in evaluate.format_binned_report(report)
