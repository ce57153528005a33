"""Versioned binary checkpoints.

Layout: 5-byte magic "SAOL1", u32 format version, a length-prefixed
UTF-8 JSON header (config, vocabularies, RNG states, metadata), a
tensor table (name, shape, raw little-endian float64 data), and an
optional Adam section mirroring the tensor table with per-tensor
moments and counters. Round-trips are bitwise lossless, including the
RNG counters needed to resume training identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .bpe import SPECIALS, Vocabulary
from .errors import CheckpointError
from .ndmath import AdamState

MAGIC = b"SAOL1"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    config: dict
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    params: dict
    adam: dict | None          # name -> AdamState
    rng_states: dict | None    # stream name -> PCG64 state dict
    meta: dict


def _write_str(f, s: str):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def _write_tensor(f, name: str, arr: np.ndarray):
    _write_str(f, name)
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(f):
    name = _read_str(f)
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def _vocab_to_json(vocab: Vocabulary) -> dict:
    return {"tokens": vocab.tokens[len(SPECIALS):],
            "freqs": vocab.freqs[len(SPECIALS):]}


def _vocab_from_json(obj: dict) -> Vocabulary:
    return Vocabulary(list(SPECIALS) + list(obj["tokens"]),
                      [0] * len(SPECIALS) + list(obj["freqs"]))


def save_checkpoint(path, *, config: dict, src_vocab: Vocabulary,
                    tgt_vocab: Vocabulary, params: dict,
                    adam: dict | None = None, rng_states: dict | None = None,
                    meta: dict | None = None):
    header = {
        "config": config,
        "src_vocab": _vocab_to_json(src_vocab),
        "tgt_vocab": _vocab_to_json(tgt_vocab),
        "rng_states": rng_states,
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_str(f, json.dumps(header, sort_keys=True))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_tensor(f, name, params[name])
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<I", len(adam)))
            for name in sorted(adam):
                st = adam[name]
                _write_str(f, name)
                f.write(struct.pack("<Q", st.step))
                f.write(struct.pack("<dddd", st.lr, st.beta1, st.beta2, st.eps))
                _write_tensor(f, name + ".m", st.m)
                _write_tensor(f, name + ".v", st.v)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version}, "
                f"this build reads version {FORMAT_VERSION}")
        header = json.loads(_read_str(f))
        (n_params,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n_params):
            name, arr = _read_tensor(f)
            params[name] = arr
        (has_adam,) = struct.unpack("<B", f.read(1))
        adam = None
        if has_adam:
            adam = {}
            (n_adam,) = struct.unpack("<I", f.read(4))
            for _ in range(n_adam):
                name = _read_str(f)
                (step,) = struct.unpack("<Q", f.read(8))
                lr, beta1, beta2, eps = struct.unpack("<dddd", f.read(32))
                _, m = _read_tensor(f)
                _, v = _read_tensor(f)
                adam[name] = AdamState(m=m, v=v, step=step, lr=lr,
                                       beta1=beta1, beta2=beta2, eps=eps)
    return CheckpointData(
        config=header["config"],
        src_vocab=_vocab_from_json(header["src_vocab"]),
        tgt_vocab=_vocab_from_json(header["tgt_vocab"]),
        params=params,
        adam=adam,
        rng_states=header.get("rng_states"),
        meta=header.get("meta", {}),
    )


def rng_state(generator: np.random.Generator) -> dict:
    return generator.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
