"""Desk-scale stacked-LSTM encoder-decoder with global attention.

Hosts any output-layer variant behind one training loop: teacher-forced
cross-entropy (optionally negative-sampled), backprop through time with
hand-derived gradients, Adam with global-norm clipping, and greedy
decoding. No autodiff framework; every gradient here is validated by
central finite differences in the test suite.

Layout conventions: batches are index matrices (B, S) right-padded with
pad=0 and masked; hidden states are row vectors, so a linear map is
`x @ W.T`. The attention is Luong-style global attention with the
"general" bilinear score and a tanh concat layer, without input
feeding, which lets the decoder LSTM run first and the attention over
all steps be computed in one vectorized block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath, outlayer, sampler
from .errors import ArgumentError, DimensionError, NumericError
from .ndmath import DTYPE
from .outlayer import LayerVariant
from .sampler import SparseGrad

GRAD_CLIP_NORM = 5.0


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d: int = 64
    d_h: int = 64
    d_j: int = 64
    layers: int = 1
    dropout_p: float = 0.0
    max_len: int = 50
    variant: LayerVariant = LayerVariant.FULL
    sample_rate: float = 1.0
    seed: int = 1
    bidirectional: bool = False

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = LayerVariant.parse(self.variant)
        if self.max_len < 1:
            raise ArgumentError(f"max_len must be >= 1, got {self.max_len}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ArgumentError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.layers < 1:
            raise ArgumentError(f"layers must be >= 1, got {self.layers}")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ArgumentError(f"sample_rate must be in (0, 1], got {self.sample_rate}")
        if self.variant is LayerVariant.TIED and self.d != self.d_h:
            raise ArgumentError(
                f"tied output layer requires d == d_h, got d={self.d}, d_h={self.d_h}")
        if self.bidirectional and self.d_h % 2:
            raise ArgumentError("bidirectional encoder needs an even d_h")


@dataclass
class Batch:
    """Padded index matrices for one mini-batch of sentence pairs."""

    src: np.ndarray        # (B, S) int
    src_mask: np.ndarray   # (B, S) 1.0 where real token
    tgt_in: np.ndarray     # (B, T) decoder inputs: bos + gold[:-1]
    tgt_out: np.ndarray    # (B, T) prediction targets: gold + eos
    tgt_mask: np.ndarray   # (B, T)

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


@dataclass
class EncDecState:
    """Decoding state threaded through decode_step."""

    enc_outputs: np.ndarray          # (S, d_h)
    src_mask: np.ndarray             # (S,)
    hidden: list                     # per layer [(h, c)], each (d_h,)
    context: np.ndarray | None = None   # attention context c_t after a step
    h_t: np.ndarray | None = None       # post-attention state after a step


class Seq2SeqModel:
    """Parameter container plus the wiring between submodules.

    `params` maps tensor names to float64 arrays; the output layer's E
    is the same object as params["tgt_emb"], so tied and joint variants
    share storage with the decoder-input embedding.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = ndmath.stream_rng(config.seed, "init")
        c = config
        p: dict[str, np.ndarray] = {}
        p["src_emb"] = ndmath.uniform_init(rng, c.src_vocab, c.d)
        p["tgt_emb"] = ndmath.uniform_init(rng, c.tgt_vocab, c.d)
        for l in range(c.layers):
            in_dim = c.d if l == 0 else c.d_h
            if c.bidirectional:
                half = c.d_h // 2
                for direction in ("fw", "bw"):
                    base = f"enc.l{l}.{direction}"
                    p[f"{base}.W"] = ndmath.uniform_init(rng, 4 * half, in_dim)
                    p[f"{base}.R"] = ndmath.uniform_init(rng, 4 * half, half)
                    p[f"{base}.b"] = np.zeros(4 * half, dtype=DTYPE)
            else:
                base = f"enc.l{l}"
                p[f"{base}.W"] = ndmath.uniform_init(rng, 4 * c.d_h, in_dim)
                p[f"{base}.R"] = ndmath.uniform_init(rng, 4 * c.d_h, c.d_h)
                p[f"{base}.b"] = np.zeros(4 * c.d_h, dtype=DTYPE)
        for l in range(c.layers):
            in_dim = c.d if l == 0 else c.d_h
            base = f"dec.l{l}"
            p[f"{base}.W"] = ndmath.uniform_init(rng, 4 * c.d_h, in_dim)
            p[f"{base}.R"] = ndmath.uniform_init(rng, 4 * c.d_h, c.d_h)
            p[f"{base}.b"] = np.zeros(4 * c.d_h, dtype=DTYPE)
        p["att.Wa"] = ndmath.uniform_init(rng, c.d_h, c.d_h)
        p["att.Wc"] = ndmath.uniform_init(rng, c.d_h, 2 * c.d_h)
        self.params = p
        self.out = outlayer.init_output_params(
            c.variant, c.tgt_vocab, c.d, c.d_h, rng,
            embedding=p["tgt_emb"], d_j=c.d_j)
        for name, tensor in self.out.dense_tensors().items():
            if name != "E":
                p[f"out.{name}"] = tensor
        self.dropout_rng = ndmath.stream_rng(c.seed, "dropout")
        self.sampler_rng = ndmath.stream_rng(c.seed, "sampler")

    def out_grad_key(self, tensor_name: str) -> str:
        return "tgt_emb" if tensor_name == "E" else f"out.{tensor_name}"

    def parameter_count(self) -> int:
        """Total allocated parameters; shared storage counted once."""
        seen = set()
        total = 0
        for arr in self.params.values():
            if id(arr) not in seen:
                seen.add(id(arr))
                total += arr.size
        return total


def capacity_param_count(model: Seq2SeqModel) -> int:
    """Whole-model parameter count under the capacity convention.

    Matches the closed-form output-layer accounting: shared embeddings
    count once and the joint projection biases b_u/b_v are excluded,
    so the JOINT-minus-TIED gap is exactly d*d_j + d_j*d_h.
    """
    total = model.parameter_count()
    for name in ("out.b_u", "out.b_v"):
        if name in model.params:
            total -= model.params[name].size
    return total


# ---------------------------------------------------------------------------
# LSTM core
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_forward(W, R, b, X, mask, h0, c0):
    """Run one LSTM direction over (B, S, in_dim) with state carry on pads.

    Masked steps leave (h, c) unchanged, so final states correspond to
    each row's true length. Returns post-carry outputs (B, S, H), final
    (h, c), and the cache needed for the backward pass.
    """
    B, S, _ = X.shape
    H = R.shape[1]
    h = np.broadcast_to(h0, (B, H)).astype(DTYPE) if h0.ndim == 1 else h0.copy()
    c = np.broadcast_to(c0, (B, H)).astype(DTYPE) if c0.ndim == 1 else c0.copy()
    outputs = np.empty((B, S, H), dtype=DTYPE)
    steps = []
    for t in range(S):
        x_t = X[:, t]
        a = x_t @ W.T + h @ R.T + b
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        m = mask[:, t:t + 1]
        steps.append((h, c, i, f, g, o, c_new))
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        outputs[:, t] = h
    cache = {"X": X, "mask": mask, "steps": steps, "H": H}
    return outputs, h, c, cache


def _lstm_backward(W, R, cache, d_outputs, dh_final, dc_final):
    """Reverse-time gradients for one LSTM direction.

    `d_outputs` are gradients on the post-carry outputs; `dh_final` and
    `dc_final` on the final carried state. Returns (dX, dW, dR, db,
    dh0, dc0).
    """
    X, mask, steps, H = cache["X"], cache["mask"], cache["steps"], cache["H"]
    B, S, _ = X.shape
    dW = np.zeros_like(W)
    dR = np.zeros_like(R)
    db = np.zeros(4 * H, dtype=DTYPE)
    dX = np.zeros_like(X)
    dh = dh_final.copy()
    dc = dc_final.copy()
    for t in range(S - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, c_new = steps[t]
        m = mask[:, t:t + 1]
        dh_t = dh + d_outputs[:, t]
        dh_new = m * dh_t
        dh_carry = (1.0 - m) * dh_t
        dc_new = m * dc
        dc_carry = (1.0 - m) * dc
        tc = np.tanh(c_new)
        do = dh_new * tc
        dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
        df = dc_new * c_prev
        dc_prev = dc_new * f
        di = dc_new * g
        dg = dc_new * i
        da = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        dW += da.T @ X[:, t]
        dR += da.T @ h_prev
        db += da.sum(axis=0)
        dX[:, t] = da @ W
        dh = dh_carry + da @ R
        dc = dc_carry + dc_prev
    return dX, dW, dR, db, dh, dc


# ---------------------------------------------------------------------------
# Encoder / decoder stacks
# ---------------------------------------------------------------------------

def _zero_state(B, H):
    return np.zeros((B, H), dtype=DTYPE), np.zeros((B, H), dtype=DTYPE)


def _run_encoder(model, src, src_mask, train_rng=None):
    """Stacked (optionally bidirectional) encoder over (B, S) indices."""
    c = model.config
    p = model.params
    X = p["src_emb"][src]
    caches = []
    finals = []
    layer_in = X
    B = src.shape[0]
    for l in range(c.layers):
        if c.bidirectional:
            half = c.d_h // 2
            h0, c0 = _zero_state(B, half)
            fw = f"enc.l{l}.fw"
            bw = f"enc.l{l}.bw"
            out_f, hf, cf, cache_f = _lstm_forward(
                p[f"{fw}.W"], p[f"{fw}.R"], p[f"{fw}.b"], layer_in, src_mask, h0, c0)
            rev_in = layer_in[:, ::-1]
            rev_mask = src_mask[:, ::-1]
            out_b, hb, cb, cache_b = _lstm_forward(
                p[f"{bw}.W"], p[f"{bw}.R"], p[f"{bw}.b"], rev_in, rev_mask, h0, c0)
            out = np.concatenate([out_f, out_b[:, ::-1]], axis=2)
            finals.append((np.concatenate([hf, hb], axis=1),
                           np.concatenate([cf, cb], axis=1)))
            layer_cache = {"kind": "bi", "fw": cache_f, "bw": cache_b}
        else:
            h0, c0 = _zero_state(B, c.d_h)
            base = f"enc.l{l}"
            out, hN, cN, cache = _lstm_forward(
                p[f"{base}.W"], p[f"{base}.R"], p[f"{base}.b"], layer_in, src_mask, h0, c0)
            finals.append((hN, cN))
            layer_cache = {"kind": "uni", "uni": cache}
        drop = None
        if train_rng is not None and c.dropout_p > 0.0:
            drop = ndmath.dropout_mask(train_rng, out.shape, c.dropout_p)
            out = out * drop
        layer_cache["drop"] = drop
        caches.append(layer_cache)
        layer_in = out
    return layer_in, finals, caches


def _encoder_backward(model, caches, d_top, d_finals):
    """Backward through the encoder stack; returns grads dict and d_src_emb rows."""
    c = model.config
    p = model.params
    grads = {}
    d_layer = d_top
    for l in range(c.layers - 1, -1, -1):
        layer_cache = caches[l]
        if layer_cache["drop"] is not None:
            d_layer = d_layer * layer_cache["drop"]
        dh_f, dc_f = d_finals[l]
        if layer_cache["kind"] == "bi":
            half = c.d_h // 2
            fw = f"enc.l{l}.fw"
            bw = f"enc.l{l}.bw"
            dX_f, dW, dR, db, _, _ = _lstm_backward(
                p[f"{fw}.W"], p[f"{fw}.R"], layer_cache["fw"],
                d_layer[:, :, :half], dh_f[:, :half], dc_f[:, :half])
            grads[f"{fw}.W"] = dW
            grads[f"{fw}.R"] = dR
            grads[f"{fw}.b"] = db
            dX_b, dW, dR, db, _, _ = _lstm_backward(
                p[f"{bw}.W"], p[f"{bw}.R"], layer_cache["bw"],
                d_layer[:, ::-1, half:], dh_f[:, half:], dc_f[:, half:])
            grads[f"{bw}.W"] = dW
            grads[f"{bw}.R"] = dR
            grads[f"{bw}.b"] = db
            d_layer = dX_f + dX_b[:, ::-1]
        else:
            base = f"enc.l{l}"
            dX, dW, dR, db, _, _ = _lstm_backward(
                p[f"{base}.W"], p[f"{base}.R"], layer_cache["uni"],
                d_layer, dh_f, dc_f)
            grads[f"{base}.W"] = dW
            grads[f"{base}.R"] = dR
            grads[f"{base}.b"] = db
            d_layer = dX
    return grads, d_layer


def _run_decoder_lstm(model, tgt_in, tgt_mask, init_states, train_rng=None):
    """Stacked decoder LSTM over teacher-forced inputs; returns top outputs."""
    c = model.config
    p = model.params
    X = p["tgt_emb"][tgt_in]
    caches = []
    layer_in = X
    for l in range(c.layers):
        base = f"dec.l{l}"
        h0, c0 = init_states[l]
        out, _, _, cache = _lstm_forward(
            p[f"{base}.W"], p[f"{base}.R"], p[f"{base}.b"], layer_in, tgt_mask, h0, c0)
        drop = None
        if train_rng is not None and c.dropout_p > 0.0:
            drop = ndmath.dropout_mask(train_rng, out.shape, c.dropout_p)
            out = out * drop
        caches.append({"uni": cache, "drop": drop})
        layer_in = out
    return layer_in, caches


def _decoder_backward(model, caches, d_top):
    """Backward through the decoder stack; returns grads, d_tgt_emb rows, d_init."""
    c = model.config
    p = model.params
    grads = {}
    d_init = []
    d_layer = d_top
    B = d_top.shape[0]
    for l in range(c.layers - 1, -1, -1):
        cache = caches[l]
        if cache["drop"] is not None:
            d_layer = d_layer * cache["drop"]
        base = f"dec.l{l}"
        zeros_h = np.zeros((B, c.d_h), dtype=DTYPE)
        dX, dW, dR, db, dh0, dc0 = _lstm_backward(
            p[f"{base}.W"], p[f"{base}.R"], cache["uni"], d_layer, zeros_h, zeros_h)
        grads[f"{base}.W"] = dW
        grads[f"{base}.R"] = dR
        grads[f"{base}.b"] = db
        d_init.append((dh0, dc0))
        d_layer = dX
    d_init.reverse()
    return grads, d_layer, d_init


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def _attention_forward(Wa, Wc, O, src_mask, Q):
    """Luong global attention ("general" score) for all query steps at once.

    O is (B, S, H) encoder outputs, Q is (B, T, H) decoder top states.
    Returns post-attention states (B, T, H), weights (B, T, S), and a
    cache for the backward pass.
    """
    u = Q @ Wa.T
    e = np.einsum("bsh,bth->bts", O, u)
    e = np.where(src_mask[:, None, :] > 0, e, -1e30)
    e_shift = e - e.max(axis=2, keepdims=True)
    exp_e = np.exp(e_shift)
    alpha = exp_e / exp_e.sum(axis=2, keepdims=True)
    ctx = np.einsum("bts,bsh->bth", alpha, O)
    v = np.concatenate([ctx, Q], axis=2)
    Ht = np.tanh(v @ Wc.T)
    cache = {"u": u, "alpha": alpha, "v": v, "Ht": Ht, "O": O, "Q": Q}
    return Ht, alpha, cache


def _attention_backward(Wa, Wc, cache, dHt):
    """Gradients of the attention block; returns (dWa, dWc, dO, dQ)."""
    u, alpha, v, Ht, O, Q = (cache[k] for k in ("u", "alpha", "v", "Ht", "O", "Q"))
    H = Ht.shape[2]
    dv_pre = dHt * (1.0 - Ht * Ht)
    dWc = dv_pre.reshape(-1, H).T @ v.reshape(-1, v.shape[2])
    dv = dv_pre @ Wc
    dctx = dv[:, :, :H]
    dQ = dv[:, :, H:].copy()
    dalpha = np.einsum("bth,bsh->bts", dctx, O)
    dO = np.einsum("bts,bth->bsh", alpha, dctx)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=2, keepdims=True))
    du = np.einsum("bts,bsh->bth", de, O)
    dO += np.einsum("bts,bth->bsh", de, u)
    dWa = du.reshape(-1, H).T @ Q.reshape(-1, H)
    dQ += du @ Wa
    return dWa, dWc, dO, dQ


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def encode(model: Seq2SeqModel, src_indices) -> EncDecState:
    """Encode one source sentence into attention memory and initial state."""
    src = np.asarray(src_indices, dtype=np.int64)
    if src.ndim != 1 or src.size == 0:
        raise ArgumentError("encode expects a nonempty 1-D index sequence")
    if src.min() < 0 or src.max() >= model.config.src_vocab:
        raise ArgumentError("source index out of vocabulary range")
    mask = np.ones((1, src.size), dtype=DTYPE)
    outputs, finals, _ = _run_encoder(model, src[None, :], mask)
    hidden = [(h[0].copy(), c[0].copy()) for h, c in finals]
    return EncDecState(enc_outputs=outputs[0], src_mask=mask[0], hidden=hidden)


def decode_step(model: Seq2SeqModel, prev_y: int, state: EncDecState):
    """Advance the decoder one step; returns (h_t, new state).

    h_t is the post-attention state fed to the output layer. The input
    state is not mutated.
    """
    c = model.config
    p = model.params
    if not 0 <= int(prev_y) < c.tgt_vocab:
        raise ArgumentError(f"target index {prev_y} out of range")
    x = p["tgt_emb"][int(prev_y)][None, :]
    mask = np.ones((1, 1), dtype=DTYPE)
    new_hidden = []
    layer_in = x[:, None, :]
    for l in range(c.layers):
        base = f"dec.l{l}"
        h0, c0 = state.hidden[l]
        out, hN, cN, _ = _lstm_forward(
            p[f"{base}.W"], p[f"{base}.R"], p[f"{base}.b"],
            layer_in, mask, h0[None, :], c0[None, :])
        new_hidden.append((hN[0], cN[0]))
        layer_in = out
    Q = layer_in
    Ht, alpha, cache = _attention_forward(
        p["att.Wa"], p["att.Wc"], state.enc_outputs[None, :, :],
        state.src_mask[None, :], Q)
    ctx = np.einsum("bts,bsh->bth", alpha, state.enc_outputs[None, :, :])
    h_t = Ht[0, 0]
    new_state = EncDecState(enc_outputs=state.enc_outputs, src_mask=state.src_mask,
                            hidden=new_hidden, context=ctx[0, 0], h_t=h_t)
    return h_t, new_state


def _forward_contexts(model, batch: Batch, train_rng=None):
    """Shared forward: all post-attention states for a batch."""
    enc_out, finals, enc_caches = _run_encoder(
        model, batch.src, batch.src_mask, train_rng)
    Q, dec_caches = _run_decoder_lstm(
        model, batch.tgt_in, batch.tgt_mask, finals, train_rng)
    Ht, alpha, att_cache = _attention_forward(
        model.params["att.Wa"], model.params["att.Wc"], enc_out, batch.src_mask, Q)
    return Ht, alpha, {"enc_caches": enc_caches, "dec_caches": dec_caches,
                       "att_cache": att_cache, "enc_out": enc_out}


def _scatter_rows(shape, rows, values):
    """Accumulate row gradients sharing indices into unique-row form."""
    uniq, inverse = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq),) + shape[1:], dtype=DTYPE)
    np.add.at(out, inverse, values)
    return uniq, out


def train_step(model: Seq2SeqModel, batch: Batch, optimizer: "AdamOptimizer",
               use_sampling: bool | None = None) -> float:
    """One teacher-forced training step; returns mean token NLL.

    Loss is averaged over non-pad target positions. Gradients are
    clipped to global L2 norm 5.0 before the Adam update. With
    sampling, vocabulary rows outside the drawn subset are untouched.
    """
    c = model.config
    if use_sampling is None:
        use_sampling = c.sample_rate < 1.0
    train_rng = model.dropout_rng if c.dropout_p > 0.0 else None
    Ht, _, caches = _forward_contexts(model, batch, train_rng)

    valid = batch.tgt_mask > 0
    H_valid = Ht[valid]
    gold = batch.tgt_out[valid]
    n = len(gold)
    if n == 0:
        raise ArgumentError("batch contains no unmasked target tokens")

    grads: dict = {}
    try:
        if use_sampling:
            subset = sampler.sample_negatives(
                np.unique(gold), c.tgt_vocab, c.sample_rate, model.sampler_rng)
            loss, out_grads = sampler.sampled_loss_and_grad(
                model.out, H_valid, gold, subset)
        else:
            logits = outlayer.forward(model.out, H_valid)
            logp = ndmath.log_softmax(logits)
            loss = -float(logp[np.arange(n), gold].sum()) / n
            G = ndmath.softmax(logits)
            G[np.arange(n), gold] -= 1.0
            G /= n
            out_grads = outlayer.backward(model.out, H_valid, G)
        if not np.isfinite(loss):
            raise NumericError("loss is not finite")
    except NumericError as e:
        raise NumericError(
            f"non-finite loss at adam step {optimizer.global_step + 1}: "
            f"batch of {batch.size} pairs, {n} target tokens ({e})") from e

    dH = out_grads.pop("h")
    for name, g in out_grads.items():
        grads[model.out_grad_key(name)] = g

    dHt = np.zeros_like(Ht)
    dHt[valid] = dH

    dWa, dWc, dO, dQ = _attention_backward(
        model.params["att.Wa"], model.params["att.Wc"], caches["att_cache"], dHt)
    grads["att.Wa"] = dWa
    grads["att.Wc"] = dWc

    dec_grads, dX_dec, d_init = _decoder_backward(model, caches["dec_caches"], dQ)
    grads.update(dec_grads)

    enc_grads, dX_enc = _encoder_backward(model, caches["enc_caches"], dO, d_init)
    grads.update(enc_grads)

    # Embedding gradients: scatter input rows; merge the output layer's
    # E contribution (dense or subset rows) into the same slot.
    src_rows, src_vals = _scatter_rows(
        model.params["src_emb"].shape, batch.src.ravel(), dX_enc.reshape(-1, c.d))
    grads["src_emb"] = SparseGrad(src_rows, src_vals, model.params["src_emb"].shape)

    tgt_rows = batch.tgt_in.ravel()
    tgt_vals = dX_dec.reshape(-1, c.d)
    e_grad = grads.pop("tgt_emb", None)
    if isinstance(e_grad, SparseGrad):
        tgt_rows = np.concatenate([tgt_rows, e_grad.indices])
        tgt_vals = np.concatenate([tgt_vals, e_grad.values])
        rows, vals = _scatter_rows(model.params["tgt_emb"].shape, tgt_rows, tgt_vals)
        grads["tgt_emb"] = SparseGrad(rows, vals, model.params["tgt_emb"].shape)
    else:
        dense = np.zeros_like(model.params["tgt_emb"]) if e_grad is None else e_grad
        np.add.at(dense, tgt_rows, tgt_vals)
        grads["tgt_emb"] = dense

    arrays = [g.values if isinstance(g, SparseGrad) else g for g in grads.values()]
    ndmath.clip_global_norm(arrays, GRAD_CLIP_NORM)
    optimizer.apply(model.params, grads)
    return loss


def loss_and_grads(model: Seq2SeqModel, batch: Batch):
    """Mean token NLL and raw (unclipped, dense) gradients; no update.

    The finite-difference harness uses this to check the full pipeline.
    """
    c = model.config
    Ht, _, caches = _forward_contexts(model, batch, None)
    valid = batch.tgt_mask > 0
    H_valid = Ht[valid]
    gold = batch.tgt_out[valid]
    n = len(gold)
    logits = outlayer.forward(model.out, H_valid)
    logp = ndmath.log_softmax(logits)
    loss = -float(logp[np.arange(n), gold].sum()) / n
    G = ndmath.softmax(logits)
    G[np.arange(n), gold] -= 1.0
    G /= n
    out_grads = outlayer.backward(model.out, H_valid, G)
    dH = out_grads.pop("h")
    grads = {model.out_grad_key(k): v for k, v in out_grads.items()}
    dHt = np.zeros_like(Ht)
    dHt[valid] = dH
    dWa, dWc, dO, dQ = _attention_backward(
        model.params["att.Wa"], model.params["att.Wc"], caches["att_cache"], dHt)
    grads["att.Wa"] = dWa
    grads["att.Wc"] = dWc
    dec_grads, dX_dec, d_init = _decoder_backward(model, caches["dec_caches"], dQ)
    grads.update(dec_grads)
    enc_grads, dX_enc = _encoder_backward(model, caches["enc_caches"], dO, d_init)
    grads.update(enc_grads)
    d_src = np.zeros_like(model.params["src_emb"])
    np.add.at(d_src, batch.src.ravel(), dX_enc.reshape(-1, c.d))
    grads["src_emb"] = d_src
    d_tgt = grads.get("tgt_emb")
    if d_tgt is None:
        d_tgt = np.zeros_like(model.params["tgt_emb"])
    else:
        d_tgt = d_tgt.copy()
    np.add.at(d_tgt, batch.tgt_in.ravel(), dX_dec.reshape(-1, c.d))
    grads["tgt_emb"] = d_tgt
    return loss, grads


def batch_loss(model: Seq2SeqModel, batch: Batch) -> float:
    """Mean token NLL without gradients (dev-set monitoring)."""
    Ht, _, _ = _forward_contexts(model, batch, None)
    valid = batch.tgt_mask > 0
    gold = batch.tgt_out[valid]
    logits = outlayer.forward(model.out, Ht[valid])
    logp = ndmath.log_softmax(logits)
    return -float(logp[np.arange(len(gold)), gold].sum()) / len(gold)


def greedy_decode(model: Seq2SeqModel, src_indices, max_len: int,
                  bos: int = 2, eos: int = 3) -> list:
    """Greedy argmax decoding with the full softmax; stops at eos.

    Logit ties resolve to the lowest index (numpy argmax order).
    """
    if max_len <= 0:
        return []
    state = encode(model, src_indices)
    cache = outlayer.make_cache(model.out)
    out = []
    prev = bos
    for _ in range(max_len):
        h_t, state = decode_step(model, prev, state)
        logits = outlayer.forward(model.out, h_t, cache=cache)
        prev = int(np.argmax(logits))
        if prev == eos:
            break
        out.append(prev)
    return out


def greedy_decode_batch(model: Seq2SeqModel, src_seqs: list, max_len: int,
                        bos: int = 2, eos: int = 3) -> list:
    """Greedy decode many sentences in parallel; returns list of index lists."""
    if not src_seqs:
        return []
    if max_len <= 0:
        return [[] for _ in src_seqs]
    c = model.config
    p = model.params
    B = len(src_seqs)
    S = max(len(s) for s in src_seqs)
    src = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=DTYPE)
    for i, s in enumerate(src_seqs):
        src[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    enc_out, finals, _ = _run_encoder(model, src, mask)
    hidden = [(h.copy(), cc.copy()) for h, cc in finals]
    cache = outlayer.make_cache(model.out)
    prev = np.full(B, bos, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    results = [[] for _ in range(B)]
    step_mask = np.ones((B, 1), dtype=DTYPE)
    for _ in range(max_len):
        layer_in = p["tgt_emb"][prev][:, None, :]
        new_hidden = []
        for l in range(c.layers):
            base = f"dec.l{l}"
            h0, c0 = hidden[l]
            out, hN, cN, _ = _lstm_forward(
                p[f"{base}.W"], p[f"{base}.R"], p[f"{base}.b"],
                layer_in, step_mask, h0, c0)
            new_hidden.append((hN, cN))
            layer_in = out
        hidden = new_hidden
        Ht, _, _ = _attention_forward(p["att.Wa"], p["att.Wc"], enc_out, mask, layer_in)
        logits = outlayer.forward(model.out, Ht[:, 0, :], cache=cache)
        prev = np.argmax(logits, axis=1)
        for i in range(B):
            if alive[i]:
                if prev[i] == eos:
                    alive[i] = False
                else:
                    results[i].append(int(prev[i]))
        if not alive.any():
            break
    return results


def greedy_token_accuracy(model: Seq2SeqModel, pairs: list, max_len: int) -> float:
    """Fraction of reference tokens reproduced at their position by greedy
    decoding; the denominator is the total reference token count."""
    hyps = greedy_decode_batch(model, [s for s, _ in pairs], max_len)
    correct = 0
    total = 0
    for hyp, (_, ref) in zip(hyps, pairs):
        total += len(ref)
        for a, b in zip(hyp, ref):
            if a == b:
                correct += 1
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Per-tensor Adam states over a named parameter dict.

    Sparse gradients update only their touched rows (or columns, for
    the d_h x |V| classifier), leaving other entries and their moments
    untouched.
    """

    def __init__(self, params: dict, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.state = {
            name: ndmath.AdamState.for_param(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for name, p in params.items()
        }
        self.global_step = 0

    def apply(self, params: dict, grads: dict):
        self.global_step += 1
        for name, g in grads.items():
            st = self.state[name]
            p = params[name]
            if isinstance(g, SparseGrad):
                if g.axis == 0:
                    ndmath.adam_step_rows(p, g.indices, g.values, st)
                else:
                    view_state = ndmath.AdamState(
                        m=st.m.T, v=st.v.T, step=st.step,
                        lr=st.lr, beta1=st.beta1, beta2=st.beta2, eps=st.eps)
                    ndmath.adam_step_rows(p.T, g.indices, g.values.T, view_state)
                    st.step = view_state.step
            else:
                ndmath.adam_step(p, g, st)
