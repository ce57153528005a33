"""Negative-sampling softmax training.

The softmax and its gradient are restricted to a sampled vocabulary
subset that always contains every in-batch gold index. One subset is
shared per mini-batch; untouched vocabulary rows receive exactly zero
gradient. Sampling at rate 1.0 degenerates to the full softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath, outlayer
from .errors import ArgumentError, ContractError
from .ndmath import DTYPE


@dataclass
class SampledSubset:
    """Sorted unique vocab indices containing all in-batch positives."""

    indices: np.ndarray
    positive_count: int
    sample_rate: float
    positives: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ArgumentError("subset indices must be unique")
        if len(self.indices) < self.positive_count:
            raise ArgumentError("subset smaller than its positive count")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class SparseGrad:
    """Gradient touching only some rows (axis 0) or columns (axis 1)."""

    indices: np.ndarray
    values: np.ndarray
    shape: tuple
    axis: int = 0

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.shape, dtype=DTYPE)
        if self.axis == 0:
            dense[self.indices] = self.values
        else:
            dense[:, self.indices] = self.values
        return dense


def sample_negatives(positives, vocab_size: int, rate: float,
                     rng: np.random.Generator, *,
                     freqs=None, unigram_power: float = 0.0) -> SampledSubset:
    """Draw a subset: all positives plus uniform negatives without replacement.

    Subset size is round(rate * vocab_size). When `unigram_power` > 0 and
    per-index `freqs` are supplied, negatives are drawn from the
    frequency distribution raised to that power instead of uniformly
    (the skip-gram 0.75 option; off by default).
    """
    pos = np.unique(np.asarray(list(positives), dtype=np.int64))
    if len(pos) == 0:
        raise ArgumentError("positives must be nonempty")
    if pos[0] < 0 or pos[-1] >= vocab_size:
        raise ArgumentError(f"positive index out of range for |V|={vocab_size}")
    if not 0.0 < rate <= 1.0:
        raise ArgumentError(f"sample rate must be in (0, 1], got {rate}")
    target = int(round(rate * vocab_size))
    if len(pos) == vocab_size:
        # Saturated: every class is positive, the rate is irrelevant.
        return SampledSubset(pos, int(len(pos)), rate, positives=pos)
    if target < len(pos):
        raise ArgumentError(
            f"rate {rate} yields subset size {target}, too small for "
            f"{len(pos)} positives")
    n_neg = target - len(pos)
    mask = np.ones(vocab_size, dtype=bool)
    mask[pos] = False
    pool = np.nonzero(mask)[0]
    if n_neg > 0:
        if unigram_power > 0.0 and freqs is not None:
            w = np.asarray(freqs, dtype=DTYPE)[pool] ** unigram_power
            total = w.sum()
            p = np.full(len(pool), 1.0 / len(pool)) if total <= 0 else w / total
            negs = rng.choice(pool, size=n_neg, replace=False, p=p)
        else:
            negs = rng.choice(pool, size=n_neg, replace=False)
        indices = np.sort(np.concatenate([pos, negs]))
    else:
        indices = pos
    return SampledSubset(indices, int(len(pos)), rate, positives=pos)


def sampled_loss_and_grad(params: outlayer.OutputLayerParams, h: np.ndarray,
                          gold, subset: SampledSubset, *,
                          proposal_correction: bool = False,
                          cache: dict | None = None):
    """Cross-entropy of the softmax restricted to the subset.

    `h` is one context (d_h,) with an int `gold`, or a stack (N, d_h)
    with golds (N,); the batched loss is the mean over rows. Gradients
    come back as a dict: dense arrays for shared tensors plus
    :class:`SparseGrad` entries for the vocabulary-indexed ones ("E" or
    "W", and "b"), whose untouched rows are exactly zero.

    With `proposal_correction` the logits are shifted by -log q(i) of
    the uniform proposal before normalization (the standard sampled-
    softmax correction; off by default, matching plain restriction).
    """
    h = np.asarray(h, dtype=DTYPE)
    single = h.ndim == 1
    H = h[None, :] if single else h
    golds = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    if len(golds) != H.shape[0]:
        raise ArgumentError(f"{H.shape[0]} contexts but {len(golds)} gold indices")

    idx = subset.indices
    pos_in_subset = np.searchsorted(idx, golds)
    clipped = np.clip(pos_in_subset, 0, len(idx) - 1)
    bad = idx[clipped] != golds
    if np.any(bad):
        raise ContractError(f"gold index {golds[bad][0]} not in sampled subset")

    if cache is None:
        cache = outlayer.make_cache(params, idx)
    logits = outlayer.forward(params, H, rows=idx, cache=cache)
    if proposal_correction:
        logits = logits - _log_proposal(subset, params.vocab_size)
    logp = ndmath.log_softmax(logits)
    n = H.shape[0]
    loss = -float(logp[np.arange(n), pos_in_subset].sum()) / n

    G = ndmath.softmax(logits)
    G[np.arange(n), pos_in_subset] -= 1.0
    G /= n
    raw = outlayer.backward(params, H, G, rows=idx)

    grads: dict = {}
    for name, g in raw.items():
        if name == "b":
            grads["b"] = SparseGrad(idx, g, (params.vocab_size,), axis=0)
        elif name == "E":
            grads["E"] = SparseGrad(idx, g, params.E.shape, axis=0)
        elif name == "W":
            grads["W"] = SparseGrad(idx, g, params.W.shape, axis=1)
        else:
            grads[name] = g
    if single:
        grads["h"] = grads["h"][0]
    return loss, grads


def _log_proposal(subset: SampledSubset, vocab_size: int) -> np.ndarray:
    """log q(i) per subset entry under the uniform-negative proposal.

    Positives are always included (q = 1); each negative's inclusion
    probability is n_neg / |pool of non-positives|.
    """
    if subset.positives is None:
        raise ArgumentError("proposal correction needs the subset's positive indices")
    n_neg = len(subset) - subset.positive_count
    pool = vocab_size - subset.positive_count
    logq = np.zeros(len(subset), dtype=DTYPE)
    if n_neg > 0 and pool > 0:
        negative_mask = ~np.isin(subset.indices, subset.positives)
        logq[negative_mask] = np.log(n_neg / pool)
    return logq
