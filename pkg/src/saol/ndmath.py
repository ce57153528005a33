"""Minimal deterministic dense numeric kernel.

Everything downstream (output layers, the encoder-decoder, sampling)
builds on the handful of operations here: matrix products, activations,
a stabilized softmax, Adam updates, seeded RNG streams, and a central
finite-difference gradient checker used as the test oracle.

Numbers are float64 throughout; row-major numpy arrays are the sole
carrier. All operations are pure given their inputs and bit-identical
on repeated evaluation. Stochastic behavior flows from one root seed
through named PCG64 streams (see :func:`stream_rng`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

DTYPE = np.float64

# Named per-consumer RNG streams, derived from the root seed with
# numpy's SeedSequence spawn keys. The numbering is part of the
# reproducibility contract: changing it changes every run.
STREAMS = {
    "init": 0,
    "dropout": 1,
    "sampler": 2,
    "shuffle": 3,
    "bootstrap": 4,
    "data": 5,
}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Return the PCG64 generator for one named consumer stream.

    Identical (seed, stream) pairs produce identical bit streams on all
    platforms. Streams are independent of each other.
    """
    if stream not in STREAMS:
        raise ArgumentError(f"unknown RNG stream {stream!r}; known: {sorted(STREAMS)}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(STREAMS[stream],))
    return np.random.Generator(np.random.PCG64(ss))


def uniform_init(rng: np.random.Generator, *shape: int, scale: float = 0.1) -> np.ndarray:
    """Uniform[-scale, scale] initializer (common seq2seq practice)."""
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape contract.

    Reduction order is numpy's fixed row-major dgemm; repeated
    evaluation of the same operands is bit-identical.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def tanh_map(x: np.ndarray) -> np.ndarray:
    """Elementwise tanh; outputs lie in (-1, 1)."""
    return np.tanh(np.asarray(x, dtype=DTYPE))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax over the last axis.

    Subtracts the row max before exponentiating, so arbitrarily large
    logits do not overflow. Rows sum to 1 within 1e-12 at float64.
    """
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0:
        raise ArgumentError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """log(softmax(x)) over the last axis, computed stably."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0:
        raise ArgumentError("log_softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("log_softmax input contains non-finite values")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def dropout_mask(rng: np.random.Generator, shape: tuple, p: float) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability p, 1/(1-p) otherwise."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= p
    return keep.astype(DTYPE) / (1.0 - p)


@dataclass
class AdamState:
    """Per-tensor Adam accumulators; shapes mirror the parameter exactly."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 0.001, **kw) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=DTYPE),
                   v=np.zeros_like(param, dtype=DTYPE), lr=lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update, applied to `params` in place.

    In-place mutation keeps aliased views (shared embeddings) valid.
    Returns `params` for convenience.
    """
    if params.shape != grads.shape:
        raise DimensionError(f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}")
    if params.shape != state.m.shape:
        raise DimensionError(f"adam_step state mismatch: params {params.shape}, moments {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def adam_step_rows(params: np.ndarray, rows: np.ndarray, row_grads: np.ndarray,
                   state: AdamState) -> np.ndarray:
    """Row-sparse Adam update: only `rows` of params and moments move.

    Used by negative-sampling training, where untouched vocabulary rows
    must stay exactly unchanged. The step counter still advances once.
    """
    if params.shape[1:] != row_grads.shape[1:] or len(rows) != len(row_grads):
        raise DimensionError(
            f"adam_step_rows mismatch: params {params.shape}, "
            f"{len(rows)} rows, grads {row_grads.shape}")
    state.step += 1
    m = state.m[rows]
    v = state.v[rows]
    m = state.beta1 * m + (1.0 - state.beta1) * row_grads
    v = state.beta2 * v + (1.0 - state.beta2) * np.square(row_grads)
    state.m[rows] = m
    state.v[rows] = v
    m_hat = m / (1.0 - state.beta1 ** state.step)
    v_hat = v / (1.0 - state.beta2 ** state.step)
    params[rows] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def clip_global_norm(arrays: list, max_norm: float) -> float:
    """Scale all arrays in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.square(a)))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for a in arrays:
            a *= scale
    return float(norm)


def grad_check(f, params: np.ndarray, analytic_grad: np.ndarray,
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a pure scalar function of `params`. Per coordinate the
    numeric gradient is (f(x+eps) - f(x-eps)) / (2 eps) and the error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ArgumentError(f"grad_check eps must be positive, got {eps}")
    if params.shape != analytic_grad.shape:
        raise DimensionError(
            f"grad_check shape mismatch: params {params.shape}, grad {analytic_grad.shape}")
    flat = params.reshape(-1)
    aflat = analytic_grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(params))
        flat[i] = orig - eps
        f_minus = float(f(params))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite objective during grad_check at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(1e-8, abs(aflat[i]) + abs(numeric))
        worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
