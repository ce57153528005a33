"""Pluggable decoder output layers.

One interface over six parametrizations that turn a translation context
h_t (the decoder's post-attention state) into vocabulary logits:

    FULL        W^T h + b             dedicated classifier matrix
    TIED        E h + b               classifier tied to the input embedding
    BILINEAR    E M h + b             bilinear joint input-output embedding
    NONLIN_OUT  sigma(E M) h + b      nonlinear output-side structure
    NONLIN_CTX  E sigma(M h) + b      nonlinear context-side structure
    JOINT       sigma(E U^T + b_u) sigma(V h + b_v) + b
                                      structure-aware joint embedding

E is the (target-side) input embedding, shared by reference: every
variant except FULL scores against the live embedding storage, never a
copy. Softmax is not applied here; the loss layer or the sampler owns
normalization. Gradients are hand-derived and validated against central
finite differences.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import ndmath
from .errors import ArgumentError, DimensionError
from .ndmath import DTYPE


class LayerVariant(enum.Enum):
    FULL = "full"
    TIED = "tied"
    BILINEAR = "bilinear"
    NONLIN_OUT = "nonlin_out"
    NONLIN_CTX = "nonlin_ctx"
    JOINT = "joint"

    @classmethod
    def parse(cls, name: str) -> "LayerVariant":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ArgumentError(
                f"unknown output layer variant {name!r}; "
                f"choose from {[v.value for v in cls]}") from None


# Variants whose logits read the shared input embedding.
EMBEDDING_VARIANTS = frozenset({
    LayerVariant.TIED, LayerVariant.BILINEAR, LayerVariant.NONLIN_OUT,
    LayerVariant.NONLIN_CTX, LayerVariant.JOINT,
})


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise ArgumentError(f"unknown activation {name!r}")


def _activate_deriv(name: str, activated: np.ndarray) -> np.ndarray:
    # Derivative expressed through the activated value.
    if name == "tanh":
        return 1.0 - np.square(activated)
    if name == "identity":
        return np.ones_like(activated)
    raise ArgumentError(f"unknown activation {name!r}")


@dataclass
class OutputLayerParams:
    """All learnable tensors of one output layer.

    Exactly the fields demanded by `variant` are set; the rest stay
    None. `E` is a reference to the shared input embedding (|V| x d),
    not a copy; `W` is d_h x |V|; `Wmid` is d x d_h; `U` is d_j x d;
    `V` is d_j x d_h; `b` is |V|; `b_u`, `b_v` are d_j.
    """

    variant: LayerVariant
    b: np.ndarray
    E: np.ndarray | None = None
    W: np.ndarray | None = None
    Wmid: np.ndarray | None = None
    U: np.ndarray | None = None
    b_u: np.ndarray | None = None
    V: np.ndarray | None = None
    b_v: np.ndarray | None = None
    activation: str = "tanh"

    _REQUIRED = {
        LayerVariant.FULL: ("W", "b"),
        LayerVariant.TIED: ("E", "b"),
        LayerVariant.BILINEAR: ("E", "Wmid", "b"),
        LayerVariant.NONLIN_OUT: ("E", "Wmid", "b"),
        LayerVariant.NONLIN_CTX: ("E", "Wmid", "b"),
        LayerVariant.JOINT: ("E", "U", "b_u", "V", "b_v", "b"),
    }

    def __post_init__(self):
        required = self._REQUIRED[self.variant]
        all_tensors = ("E", "W", "Wmid", "U", "b_u", "V", "b_v", "b")
        for name in all_tensors:
            value = getattr(self, name)
            if name in required and value is None:
                raise ArgumentError(f"{self.variant.value} requires tensor {name}")
            if name not in required and value is not None:
                raise ArgumentError(f"{self.variant.value} must not carry tensor {name}")

    @property
    def vocab_size(self) -> int:
        return self.b.shape[0]

    @property
    def d_h(self) -> int:
        v = self.variant
        if v is LayerVariant.FULL:
            return self.W.shape[0]
        if v is LayerVariant.TIED:
            return self.E.shape[1]
        if v is LayerVariant.JOINT:
            return self.V.shape[1]
        return self.Wmid.shape[1]

    def dense_tensors(self) -> dict:
        """Name -> array for every tensor this variant carries."""
        out = {}
        for name in self._REQUIRED[self.variant]:
            out[name] = getattr(self, name)
        return out


def init_output_params(variant: LayerVariant, vocab_size: int, d: int, d_h: int,
                       rng: np.random.Generator, embedding: np.ndarray | None = None,
                       d_j: int = 0, activation: str = "tanh") -> OutputLayerParams:
    """Allocate an output layer; `embedding` is shared by reference."""
    if variant is LayerVariant.TIED and d != d_h:
        raise ArgumentError(f"tied output layer requires d == d_h, got d={d}, d_h={d_h}")
    if variant in EMBEDDING_VARIANTS:
        if embedding is None:
            raise ArgumentError(f"{variant.value} needs the shared input embedding")
        if embedding.shape != (vocab_size, d):
            raise DimensionError(
                f"embedding shape {embedding.shape} != ({vocab_size}, {d})")
    b = np.zeros(vocab_size, dtype=DTYPE)
    if variant is LayerVariant.FULL:
        return OutputLayerParams(variant, b=b, W=ndmath.uniform_init(rng, d_h, vocab_size))
    if variant is LayerVariant.TIED:
        return OutputLayerParams(variant, b=b, E=embedding)
    if variant in (LayerVariant.BILINEAR, LayerVariant.NONLIN_OUT, LayerVariant.NONLIN_CTX):
        return OutputLayerParams(variant, b=b, E=embedding,
                                 Wmid=ndmath.uniform_init(rng, d, d_h),
                                 activation=activation)
    if variant is LayerVariant.JOINT:
        if d_j < 1:
            raise ArgumentError(f"joint layer needs d_j >= 1, got {d_j}")
        return OutputLayerParams(
            variant, b=b, E=embedding,
            U=ndmath.uniform_init(rng, d_j, d),
            b_u=np.zeros(d_j, dtype=DTYPE),
            V=ndmath.uniform_init(rng, d_j, d_h),
            b_v=np.zeros(d_j, dtype=DTYPE),
            activation=activation)
    raise ArgumentError(f"unknown variant {variant}")


def make_cache(params: OutputLayerParams, rows: np.ndarray | None = None) -> dict:
    """Precompute the output-side projection for repeated scoring.

    The cache is valid only while E and the projection weights are
    unchanged; training code must rebuild it after every update.
    """
    v = params.variant
    E = params.E if rows is None or params.E is None else params.E[rows]
    cache: dict = {"rows": rows}
    if v is LayerVariant.JOINT:
        A = E @ params.U.T + params.b_u
        cache["A"] = A
        cache["Eprime"] = _activate(params.activation, A)
    elif v is LayerVariant.NONLIN_OUT:
        P = E @ params.Wmid
        cache["P"] = P
        cache["S"] = _activate(params.activation, P)
    elif v is LayerVariant.BILINEAR:
        cache["P"] = E @ params.Wmid
    return cache


def _check_h(params: OutputLayerParams, h: np.ndarray):
    h = np.asarray(h, dtype=DTYPE)
    single = h.ndim == 1
    H = h[None, :] if single else h
    if H.ndim != 2 or H.shape[1] != params.d_h:
        raise DimensionError(
            f"{params.variant.value} forward expects context of size {params.d_h}, "
            f"got shape {h.shape}")
    return H, single


def forward(params: OutputLayerParams, h: np.ndarray,
            rows: np.ndarray | None = None, cache: dict | None = None) -> np.ndarray:
    """Logits for one context vector (d_h,) or a stack of them (N, d_h).

    With `rows` given, only those vocabulary entries are scored (the
    negative-sampling path); the result has len(rows) columns.
    """
    H, single = _check_h(params, h)
    v = params.variant
    if cache is None or (cache.get("rows") is not rows):
        cache = make_cache(params, rows)
    b = params.b if rows is None else params.b[rows]
    if v is LayerVariant.FULL:
        W = params.W if rows is None else params.W[:, rows]
        logits = H @ W + b
    elif v is LayerVariant.TIED:
        E = params.E if rows is None else params.E[rows]
        logits = H @ E.T + b
    elif v is LayerVariant.BILINEAR:
        logits = H @ cache["P"].T + b
    elif v is LayerVariant.NONLIN_OUT:
        logits = H @ cache["S"].T + b
    elif v is LayerVariant.NONLIN_CTX:
        E = params.E if rows is None else params.E[rows]
        S = _activate(params.activation, H @ params.Wmid.T)
        logits = S @ E.T + b
    elif v is LayerVariant.JOINT:
        Hp = _activate(params.activation, H @ params.V.T + params.b_v)
        logits = Hp @ cache["Eprime"].T + b
    else:
        raise ArgumentError(f"unknown variant {v}")
    return logits[0] if single else logits


def backward(params: OutputLayerParams, h: np.ndarray, grad_logits: np.ndarray,
             rows: np.ndarray | None = None) -> dict:
    """Gradients of `sum(grad_logits * forward(params, h))`.

    Returns a dict keyed by tensor name plus "h". When `rows` is given,
    the "E" / "W" / "b" entries hold only the touched slices (rows of E
    and b, columns of W); everything shared stays dense. The "E"
    gradient covers only this layer's path; the trainer accumulates it
    into the embedding's slot.
    """
    H, single = _check_h(params, h)
    G = np.asarray(grad_logits, dtype=DTYPE)
    G = G[None, :] if single else G
    k = params.vocab_size if rows is None else len(rows)
    if G.shape != (H.shape[0], k):
        raise DimensionError(
            f"{params.variant.value} backward expects upstream grad {(H.shape[0], k)}, "
            f"got {G.shape}")
    v = params.variant
    act = params.activation
    grads: dict = {"b": G.sum(axis=0)}
    if v is LayerVariant.FULL:
        W = params.W if rows is None else params.W[:, rows]
        grads["W"] = H.T @ G
        dH = G @ W.T
    elif v is LayerVariant.TIED:
        E = params.E if rows is None else params.E[rows]
        grads["E"] = G.T @ H
        dH = G @ E
    elif v is LayerVariant.BILINEAR:
        E = params.E if rows is None else params.E[rows]
        P = E @ params.Wmid
        dP = G.T @ H
        grads["E"] = dP @ params.Wmid.T
        grads["Wmid"] = E.T @ dP
        dH = G @ P
    elif v is LayerVariant.NONLIN_OUT:
        E = params.E if rows is None else params.E[rows]
        S = _activate(act, E @ params.Wmid)
        dS = G.T @ H
        dP = dS * _activate_deriv(act, S)
        grads["E"] = dP @ params.Wmid.T
        grads["Wmid"] = E.T @ dP
        dH = G @ S
    elif v is LayerVariant.NONLIN_CTX:
        E = params.E if rows is None else params.E[rows]
        S = _activate(act, H @ params.Wmid.T)
        dS = G @ E
        dZ = dS * _activate_deriv(act, S)
        grads["E"] = G.T @ S
        grads["Wmid"] = dZ.T @ H
        dH = dZ @ params.Wmid
    elif v is LayerVariant.JOINT:
        E = params.E if rows is None else params.E[rows]
        Eprime = _activate(act, E @ params.U.T + params.b_u)
        Hp = _activate(act, H @ params.V.T + params.b_v)
        dEp = G.T @ Hp
        dHp = G @ Eprime
        dA = dEp * _activate_deriv(act, Eprime)
        dZ = dHp * _activate_deriv(act, Hp)
        grads["E"] = dA @ params.U
        grads["U"] = dA.T @ E
        grads["b_u"] = dA.sum(axis=0)
        grads["V"] = dZ.T @ H
        grads["b_v"] = dZ.sum(axis=0)
        dH = dZ @ params.V
    else:
        raise ArgumentError(f"unknown variant {v}")
    grads["h"] = dH[0] if single else dH
    return grads


# ---------------------------------------------------------------------------
# Capacity accounting
# ---------------------------------------------------------------------------

@dataclass
class CapacityReport:
    """Effective output-layer parameter count and its per-tensor breakdown.

    The convention follows the closed forms: the shared input embedding
    never counts, and the joint projection biases b_u/b_v are treated as
    capacity-negligible (the closed form omits them even though they are
    allocated). `counts_shared_embedding` is always False under this
    convention and exists to make that explicit.
    """

    variant: LayerVariant
    effective_param_count: int
    breakdown: list[tuple[str, int]]
    counts_shared_embedding: bool = False

    def __post_init__(self):
        total = sum(count for _, count in self.breakdown)
        if total != self.effective_param_count:
            raise ArgumentError(
                f"capacity breakdown sums to {total}, "
                f"expected {self.effective_param_count}")


def param_count(variant: LayerVariant, vocab_size: int, d: int, d_h: int,
                d_j: int = 0) -> CapacityReport:
    """Effective output-layer capacity by the closed forms.

    FULL: |V| d_h + |V|; TIED: |V|; BILINEAR and both NONLIN forms:
    d d_h + |V|; JOINT: d d_j + d_j d_h + |V|.
    """
    if vocab_size < 1 or d < 1 or d_h < 1:
        raise ArgumentError("dimensions must be positive")
    if variant is LayerVariant.TIED and d != d_h:
        raise ArgumentError(f"tied output layer requires d == d_h, got d={d}, d_h={d_h}")
    if variant is LayerVariant.FULL:
        breakdown = [("W", vocab_size * d_h), ("b", vocab_size)]
    elif variant is LayerVariant.TIED:
        breakdown = [("b", vocab_size)]
    elif variant in (LayerVariant.BILINEAR, LayerVariant.NONLIN_OUT, LayerVariant.NONLIN_CTX):
        breakdown = [("Wmid", d * d_h), ("b", vocab_size)]
    elif variant is LayerVariant.JOINT:
        if d_j < 1:
            raise ArgumentError(f"joint capacity needs d_j >= 1, got {d_j}")
        breakdown = [("U", d_j * d), ("V", d_j * d_h), ("b", vocab_size)]
    else:
        raise ArgumentError(f"unknown variant {variant}")
    return CapacityReport(variant, sum(c for _, c in breakdown), breakdown)


@dataclass
class CapacityChain:
    """The capacity ordering C_tied < C_bilinear <= C_joint <= C_base.

    `joint_counts` maps each requested d_j to its count and whether it
    falls inside the chain; `dj_interval` is the closed d_j range on
    which the middle inequalities hold.
    """

    vocab_size: int
    d: int
    d_h: int
    c_tied: int
    c_bilinear: int
    c_base: int
    joint_counts: dict
    dj_interval: tuple[int, int]

    def in_chain(self, d_j: int) -> bool:
        lo, hi = self.dj_interval
        return lo <= d_j <= hi


def capacity_order(vocab_size: int, d: int, d_h: int, d_j_values) -> CapacityChain:
    """Evaluate the capacity chain over a d_j grid.

    Counts use :func:`param_count` (TIED needs d == d_h to exist in the
    chain, matching its constraint). Values of d_j outside
    [d d_h / (d + d_h), |V| d_h / (d + d_h)] are flagged as outside the
    chain rather than rejected.
    """
    c_tied = param_count(LayerVariant.TIED, vocab_size, d_h, d_h).effective_param_count
    c_bil = param_count(LayerVariant.BILINEAR, vocab_size, d, d_h).effective_param_count
    c_base = param_count(LayerVariant.FULL, vocab_size, d, d_h).effective_param_count
    lo = int(np.ceil(d * d_h / (d + d_h)))
    hi = int(np.floor(vocab_size * d_h / (d + d_h)))
    joint_counts = {}
    for d_j in d_j_values:
        c_joint = param_count(LayerVariant.JOINT, vocab_size, d, d_h,
                              d_j=d_j).effective_param_count
        inside = lo <= d_j <= hi
        if inside and not (c_tied < c_bil <= c_joint <= c_base):
            raise ArgumentError(
                f"capacity chain violated at d_j={d_j}: "
                f"{c_tied} < {c_bil} <= {c_joint} <= {c_base}")
        joint_counts[int(d_j)] = (c_joint, inside)
    return CapacityChain(vocab_size, d, d_h, c_tied, c_bil, c_base,
                         joint_counts, (lo, hi))
