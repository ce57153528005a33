import numpy as np
import pytest

from saol import checkpoint, ndmath
from saol.bpe import Vocabulary, SPECIALS
from saol.errors import CheckpointError
from saol.ndmath import AdamState


def small_vocab(tokens):
    return Vocabulary(list(SPECIALS) + tokens, [0] * 4 + [5] * len(tokens))


def make_payload():
    rng = ndmath.stream_rng(0, "init")
    params = {
        "emb": ndmath.uniform_init(rng, 6, 3),
        "w": ndmath.uniform_init(rng, 4, 5),
        "b": ndmath.uniform_init(rng, 7),
    }
    adam = {name: AdamState.for_param(p) for name, p in params.items()}
    adam["w"].step = 13
    adam["w"].m[...] = 0.25
    gen = ndmath.stream_rng(3, "dropout")
    gen.random(17)  # advance so the counter round-trips nontrivially
    rng_states = {"dropout": checkpoint.rng_state(gen)}
    return params, adam, rng_states


class TestRoundTrip:
    def test_bitwise_lossless(self, tmp_path):
        params, adam, rng_states = make_payload()
        path = tmp_path / "model.saol"
        checkpoint.save_checkpoint(
            path, config={"d": 3, "lr": 0.001, "variant": "joint"},
            src_vocab=small_vocab(["a", "b"]), tgt_vocab=small_vocab(["x"]),
            params=params, adam=adam, rng_states=rng_states,
            meta={"epoch": 2, "best_bleu": 31.4159})
        ck = checkpoint.load_checkpoint(path)
        assert ck.config == {"d": 3, "lr": 0.001, "variant": "joint"}
        assert ck.src_vocab.tokens == list(SPECIALS) + ["a", "b"]
        for name, arr in params.items():
            np.testing.assert_array_equal(ck.params[name], arr)
        assert ck.adam["w"].step == 13
        np.testing.assert_array_equal(ck.adam["w"].m, adam["w"].m)
        np.testing.assert_array_equal(ck.adam["w"].v, adam["w"].v)
        assert ck.adam["w"].lr == adam["w"].lr
        assert ck.meta == {"epoch": 2, "best_bleu": 31.4159}

    def test_rng_counter_resumes_stream(self, tmp_path):
        params, adam, rng_states = make_payload()
        path = tmp_path / "model.saol"
        checkpoint.save_checkpoint(
            path, config={}, src_vocab=small_vocab(["a"]), tgt_vocab=small_vocab(["x"]),
            params=params, adam=None, rng_states=rng_states, meta={})
        ck = checkpoint.load_checkpoint(path)
        restored = checkpoint.restore_rng(ck.rng_states["dropout"])
        original = ndmath.stream_rng(3, "dropout")
        original.random(17)
        np.testing.assert_array_equal(restored.random(8), original.random(8))

    def test_double_round_trip_identical_bytes(self, tmp_path):
        params, adam, rng_states = make_payload()
        p1, p2 = tmp_path / "a.saol", tmp_path / "b.saol"
        for p in (p1, p2):
            checkpoint.save_checkpoint(
                p, config={"x": 1}, src_vocab=small_vocab(["a"]),
                tgt_vocab=small_vocab(["x"]), params=params, adam=adam,
                rng_states=rng_states, meta={"epoch": 1})
        assert p1.read_bytes() == p2.read_bytes()


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.saol"
        path.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        params, adam, rng_states = make_payload()
        path = tmp_path / "model.saol"
        checkpoint.save_checkpoint(
            path, config={}, src_vocab=small_vocab(["a"]),
            tgt_vocab=small_vocab(["x"]), params=params, adam=None,
            rng_states=None, meta={})
        raw = bytearray(path.read_bytes())
        raw[5] = 99  # version byte
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            checkpoint.load_checkpoint(path)
