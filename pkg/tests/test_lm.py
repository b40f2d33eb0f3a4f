"""Tokenizer, vocab, and the split utterance LM."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from todkat.errors import ContractError, DataFormatError
from todkat.lm import (
    BOS,
    CLS,
    PAD,
    RESERVED,
    UNK,
    LMConfig,
    SplitLM,
    Vocab,
    build_vocab,
    encode_utterance,
    tokenize,
)
from todkat.nn import ParamStore
from todkat.numerics import AdamState, RngStream, Tape, adam_step
from todkat.numerics import tensor as T

from helpers import store_gradcheck


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("I won, really!") == ["i", "won", ",", "really", "!"]

    def test_apostrophe_stays_inside_word(self):
        assert tokenize("don't") == ["don't"]

    @given(st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1))
    @settings(max_examples=50, deadline=None)
    def test_nonspace_ascii_yields_tokens(self, s):
        toks = tokenize(s)
        assert toks
        assert all(t == t.lower() for t in toks)
        assert "".join(toks).replace(" ", "") == s.lower().replace(" ", "")


class TestVocab:
    def test_roundtrip_and_unk(self):
        v = Vocab(RESERVED + ["apple", "pear"])
        assert v.id_of("apple") == 6
        assert v.token_of(6) == "apple"
        assert v.id_of("mango") == UNK

    def test_reserved_prefix_required(self):
        with pytest.raises(ContractError):
            Vocab(["apple"] + RESERVED)

    def test_duplicates_rejected(self):
        with pytest.raises(ContractError):
            Vocab(RESERVED + ["apple", "apple"])

    def test_save_load_roundtrip(self, tmp_path):
        v = Vocab(RESERVED + ["b", "a"])
        p = tmp_path / "vocab.txt"
        v.save(p)
        w = Vocab.load(p)
        assert len(w) == len(v)
        assert w.token_of(7) == "a"

    def test_load_rejects_bad_header(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("apple\nbanana\n")
        with pytest.raises(DataFormatError):
            Vocab.load(p)


class TestBuildVocab:
    def test_frequency_order_with_lexicographic_ties(self):
        v = build_vocab(["b b a a c"])
        # a and b both occur twice; a precedes b on the tie
        assert [v.token_of(i) for i in (6, 7, 8)] == ["a", "b", "c"]

    def test_min_freq_drops_rare_tokens(self):
        v = build_vocab(["a a b"], min_freq=2)
        assert v.id_of("b") == UNK

    def test_max_size_counts_reserved_and_extras(self):
        v = build_vocab(
            ["a a b b c"], max_size=9, extra_tokens=["<xreact>"]
        )
        assert len(v) == 9
        assert v.id_of("<xreact>") == 6  # extras come first
        assert v.id_of("c") == UNK  # squeezed out

    def test_extra_tokens_survive_tokenizer_splitting(self):
        # the tokenizer would shatter "<xreact>", so it must enter whole
        v = build_vocab(["plain text"], extra_tokens=["<xreact>"])
        assert v.id_of("<xreact>") != UNK


class TestEncodeUtterance:
    def test_cls_prefix_and_pad_fill(self):
        v = build_vocab(["a b"])
        row = encode_utterance("a b", v, 6)
        assert row[0] == CLS
        assert row.tolist()[3:] == [PAD, PAD, PAD]

    def test_truncation(self):
        v = build_vocab(["a b c d e"])
        row = encode_utterance("a b c d e", v, 4)
        assert row.shape == (4,) and row[0] == CLS

    def test_max_tokens_floor(self):
        v = build_vocab(["a"])
        with pytest.raises(ContractError):
            encode_utterance("a", v, 1)


def tiny_lm(vocab_size=16, max_tokens=8, seed=3):
    cfg = LMConfig(
        vocab_size=vocab_size,
        d_model=8,
        n_heads=2,
        n_lower=1,
        n_upper=1,
        d_ff=16,
        d_z=4,
        max_tokens=max_tokens,
    )
    store = ParamStore()
    lm = SplitLM(store, cfg, RngStream(seed))
    return store, lm


class TestEncodeLower:
    def test_input_contracts(self):
        _, lm = tiny_lm()
        with pytest.raises(ContractError):
            lm.encode_lower(np.zeros((2, 4), dtype=np.int64))
        with pytest.raises(ContractError):
            lm.encode_lower(np.array([PAD, PAD]))  # no CLS
        with pytest.raises(ContractError):
            lm.encode_lower(np.full(9, CLS, dtype=np.int64))

    def test_padding_does_not_leak(self):
        # same tokens, more PAD -> bit-identical states at real positions
        _, lm = tiny_lm()
        short = np.array([CLS, 7, 8, 9], dtype=np.int64)
        padded = np.array([CLS, 7, 8, 9, PAD, PAD, PAD], dtype=np.int64)
        a = lm.encode_lower(short)
        b = lm.encode_lower(padded)
        assert (a.token_states.data == b.token_states.data[:4]).all()
        assert (a.pooled.data == b.pooled.data).all()
        assert b.valid.tolist() == [True] * 4 + [False] * 3

    def test_pooled_is_first_row(self):
        _, lm = tiny_lm()
        enc = lm.encode_lower(np.array([CLS, 6, 7], dtype=np.int64))
        assert (enc.pooled.data[0] == enc.token_states.data[0]).all()


class TestDecodeUpper:
    def test_shapes_and_real_token_count(self):
        _, lm = tiny_lm()
        ids = np.array([CLS, 7, 8, PAD, PAD], dtype=np.int64)
        enc = lm.encode_lower(ids)
        z = T.constant(np.zeros((1, 4)))
        logits, loss, n_real = lm.decode_upper(z, enc)
        assert logits.data.shape == (4, 16)
        assert n_real == 2  # the two PAD targets are ignored
        assert np.isfinite(loss.item())

    def test_pad_targets_do_not_change_loss(self):
        _, lm = tiny_lm()
        z = T.constant(np.zeros((1, 4)))
        bare = lm.encode_lower(np.array([CLS, 7, 8, 9], dtype=np.int64))
        padded = lm.encode_lower(
            np.array([CLS, 7, 8, 9, PAD, PAD], dtype=np.int64)
        )
        _, l0, n0 = lm.decode_upper(z, bare)
        _, l1, n1 = lm.decode_upper(z, padded)
        assert n0 == n1 == 3
        assert l0.item() == l1.item()

    def test_latent_actually_conditions_logits(self):
        _, lm = tiny_lm()
        enc = lm.encode_lower(np.array([CLS, 7, 8], dtype=np.int64))
        la, _, _ = lm.decode_upper(T.constant(np.zeros((1, 4))), enc)
        lb, _, _ = lm.decode_upper(T.constant(np.full((1, 4), 2.0)), enc)
        assert np.abs(la.data - lb.data).max() > 1e-6

    def test_needs_a_target_position(self):
        _, lm = tiny_lm()
        enc = lm.encode_lower(np.array([CLS], dtype=np.int64))
        with pytest.raises(ContractError):
            lm.decode_upper(T.constant(np.zeros((1, 4))), enc)

    def test_initial_loss_near_uniform(self):
        # fresh params keep logits small, so per-token NLL sits near
        # log(vocab)
        _, lm = tiny_lm(vocab_size=32)
        enc = lm.encode_lower(np.array([CLS, 7, 8, 9, 10], dtype=np.int64))
        _, loss, n = lm.decode_upper(T.constant(np.zeros((1, 4))), enc)
        per_tok = loss.item() / n
        assert abs(per_tok - np.log(32)) < 0.7

    def test_reconstruction_gradients(self):
        store, lm = tiny_lm(vocab_size=10, max_tokens=6)
        ids = np.array([CLS, 6, 7, 8], dtype=np.int64)
        z = np.full((1, 4), 0.3)

        def loss_fn():
            enc = lm.encode_lower(ids)
            _, loss, _ = lm.decode_upper(T.constant(z.copy()), enc)
            return loss

        store_gradcheck(
            store, ["lm.upper.zproj.w", "lm.embed.table"], loss_fn, tol=1e-4
        )

    def test_memorizes_a_tiny_corpus(self):
        store, lm = tiny_lm(vocab_size=16, max_tokens=6, seed=5)
        rows = [
            np.array([CLS, 6, 7, 8, 9], dtype=np.int64),
            np.array([CLS, 10, 11, 12, 13], dtype=np.int64),
        ]
        z = np.zeros((1, 4))
        opt = AdamState(lr=1e-2)
        last = None
        for _ in range(80):
            store.zero_grad()
            with Tape() as tape:
                total = None
                for ids in rows:
                    enc = lm.encode_lower(ids)
                    _, loss, _ = lm.decode_upper(T.constant(z), enc)
                    total = loss if total is None else T.add(total, loss)
            tape.backward(total)
            adam_step(store.arrays(), store.grads(), opt)
            store.bump()
            last = total.item() / 8.0
        assert last < 0.1, "per-token NLL %.3f after 80 steps" % last
