"""Byte-pair-encoding subword pipeline.

Words are split to characters (the last one tagged with an internal
end-of-word marker), then the most frequent adjacent symbol pair is
merged repeatedly. Applied tokens use the "@@" continuation-suffix
convention: every non-final subword of a word carries a trailing "@@",
so detokenization is `" ".join(tokens).replace("@@ ", "")`.

Vocabularies reserve pad=0, unk=1, bos=2, eos=3; specials are never
produced by BPE and never counted in frequency bins.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import ArgumentError, CorpusError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
_EOW = chr(0) + "eow"  # internal word-final tag; never appears in rendered tokens

MERGE_FILE_HEADER = "SAOL-BPE v1"
CONTINUATION = "@@"


@dataclass
class MergeTable:
    """Ordered BPE merges; order is the application order."""

    merges: list = field(default_factory=list)
    _word_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_ops(self) -> int:
        return len(self.merges)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ArgumentError("merge table contains duplicate pairs")


def _word_symbols(word: str) -> tuple:
    chars = list(word)
    chars[-1] = chars[-1] + _EOW
    return tuple(chars)


def _merge_word(symbols: tuple, pair: tuple) -> tuple:
    left, right = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(lines, num_ops: int) -> MergeTable:
    """Learn up to `num_ops` merges from a corpus of text lines.

    Pair counts include overlapping occurrences; ties break on the
    lexicographically smallest pair, so learning is deterministic.
    Stops early once no pair occurs twice.
    """
    if num_ops < 0:
        raise ArgumentError(f"num_ops must be >= 0, got {num_ops}")
    word_freq = Counter()
    for line in lines:
        for word in line.split():
            word_freq[word] += 1
    if not word_freq:
        raise ArgumentError("cannot learn BPE from an empty corpus")
    words = {_word_symbols(w): f for w, f in word_freq.items()}
    merges = []
    for _ in range(num_ops):
        pairs = Counter()
        for symbols, freq in words.items():
            for a, b in zip(symbols, symbols[1:]):
                pairs[(a, b)] += freq
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        merges.append(best)
        words = {_merge_word(s, best): f for s, f in words.items()}
    return MergeTable(merges)


def _encode_word(merges: MergeTable, word: str) -> tuple:
    cached = merges._word_cache.get(word)
    if cached is not None:
        return cached
    symbols = _word_symbols(word)
    for pair in merges.merges:
        if len(symbols) == 1:
            break
        symbols = _merge_word(symbols, pair)
    tokens = tuple(
        s[:-len(_EOW)] if s.endswith(_EOW) else s + CONTINUATION
        for s in symbols)
    merges._word_cache[word] = tokens
    return tokens


def apply_bpe(merges: MergeTable, line: str) -> list:
    """Tokenize one line; merges apply greedily in learned order."""
    tokens = []
    for word in line.split():
        tokens.extend(_encode_word(merges, word))
    return tokens


def detokenize(tokens) -> str:
    """Reverse apply_bpe for lines that do not contain the marker."""
    if isinstance(tokens, str):
        joined = tokens
    else:
        joined = " ".join(tokens)
    return joined.replace(CONTINUATION + " ", "")


@dataclass
class Vocabulary:
    """Dense token<->index bijection with corpus frequencies.

    Indices 0..3 are the reserved specials; data tokens follow in
    descending frequency order (ties by token string).
    """

    tokens: list
    freqs: list
    index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ArgumentError("vocabulary tokens are not unique")
        if len(self.freqs) != len(self.tokens):
            raise ArgumentError("vocabulary frequency list length mismatch")

    def __len__(self) -> int:
        return len(self.tokens)

    def to_id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_ids(self, tokens) -> list:
        return [self.index.get(t, UNK) for t in tokens]

    def to_tokens(self, ids) -> list:
        return [self.tokens[i] for i in ids]


def build_vocab(tokenized_corpus, max_size: int | None = None) -> Vocabulary:
    """Frequency-sorted vocabulary over token sequences, specials prepended.

    `max_size` caps the total size (including the 4 specials), keeping
    the most frequent tokens. Corpus tokens colliding with a special
    string are dropped (they would break the bijection) and such input
    positions fall back to unk.
    """
    counts = Counter()
    for tokens in tokenized_corpus:
        counts.update(tokens)
    for special in SPECIALS:
        counts.pop(special, None)
    if not counts:
        raise ArgumentError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        if max_size < len(SPECIALS):
            raise ArgumentError(f"max_size must be >= {len(SPECIALS)}")
        ordered = ordered[:max_size - len(SPECIALS)]
    tokens = list(SPECIALS) + [t for t, _ in ordered]
    freqs = [0] * len(SPECIALS) + [c for _, c in ordered]
    return Vocabulary(tokens, freqs)


def frequency_bins(vocab: Vocabulary):
    """Split non-special indices into (high, medium, low) frequency bins.

    Tokens are ranked by descending frequency (ties by token string);
    each bin gets floor(n/3) tokens and the remainder goes to the high
    bin.
    """
    order = sorted(range(len(SPECIALS), len(vocab)),
                   key=lambda i: (-vocab.freqs[i], vocab.tokens[i]))
    n = len(order)
    if n < 3:
        raise ArgumentError(f"need at least 3 non-special tokens, got {n}")
    base = n // 3
    high_n = n - 2 * base
    high = set(order[:high_n])
    medium = set(order[high_n:high_n + base])
    low = set(order[high_n + base:])
    return high, medium, low


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_merges(merges: MergeTable, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(MERGE_FILE_HEADER + "\n")
        for left, right in merges.merges:
            f.write(f"{_escape(left)} {_escape(right)}\n")


def load_merges(path) -> MergeTable:
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read merge file: {e}", path=path) from e
    if not lines or lines[0] != MERGE_FILE_HEADER:
        raise CorpusError(f"bad merge file header, expected {MERGE_FILE_HEADER!r}",
                          path=path, line=1)
    merges = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise CorpusError("merge line must be 'left right'", path=path, line=i)
        merges.append((_unescape(parts[0]), _unescape(parts[1])))
    return MergeTable(merges)


def _escape(symbol: str) -> str:
    return symbol.replace(_EOW, "</w>")


def _unescape(text: str) -> str:
    return text.replace("</w>", _EOW)


def save_vocab(vocab: Vocabulary, path):
    """Write 'token<tab>frequency' lines; index = line order after specials."""
    with open(path, "w", encoding="utf-8") as f:
        for token, freq in zip(vocab.tokens[len(SPECIALS):], vocab.freqs[len(SPECIALS):]):
            f.write(f"{token}\t{freq}\n")


def load_vocab(path) -> Vocabulary:
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read vocab file: {e}", path=path) from e
    tokens = list(SPECIALS)
    freqs = [0] * len(SPECIALS)
    for i, line in enumerate(lines, start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError("vocab line must be 'token<tab>frequency'",
                              path=path, line=i)
        tokens.append(parts[0])
        freqs.append(int(parts[1]))
    return Vocabulary(tokens, freqs)
