"""Knowledge base, retrieval, generation, source gate, and fusion."""

import json

import numpy as np
import pytest

from todkat.errors import ContractError, DataFormatError
from todkat.knowledge import (
    DEFAULT_RELATIONS,
    RELATIONS,
    GenConfig,
    GenTrainConfig,
    KnowledgeFuser,
    Seq2SeqGenerator,
    SourceSelector,
    canonical_relation,
    cosine,
    load_kb,
    relation_marker,
    retrieve_topk,
    train_generator,
)
from todkat.lm import CLS, PAD, build_vocab
from todkat.nn import ParamStore
from todkat.numerics import RngStream, Tape
from todkat.numerics import tensor as T


class TestRelations:
    def test_canonical_passthrough_and_aliases(self):
        assert canonical_relation("xReact") == "xReact"
        assert canonical_relation("xNeed") == "sNeed"
        assert canonical_relation("xAttr") == "sAttr"
        with pytest.raises(DataFormatError):
            canonical_relation("zzz")

    def test_defaults_are_canonical(self):
        assert set(DEFAULT_RELATIONS) <= set(RELATIONS)

    def test_marker_format(self):
        assert relation_marker("xReact") == "<xreact>"


def write_kb(path, triples):
    with open(path, "w") as f:
        for h, r, t in triples:
            f.write(json.dumps({"head": h, "relation": r, "tail": t}) + "\n")


class TestLoadKB:
    def test_roundtrip_and_accessors(self, tmp_path):
        p = tmp_path / "kb.jsonl"
        write_kb(
            p,
            [
                ("won a race", "xReact", "feels proud"),
                ("won a race", "xIntent", "to compete"),
                ("lost a bet", "xReact", "feels silly"),
            ],
        )
        kb = load_kb(p)
        assert len(kb) == 3
        assert kb.heads() == ["won a race", "lost a bet"]  # deduped, ordered
        assert "feels proud" in kb.texts() and "won a race" in kb.texts()
        assert kb.by_relation["xReact"] == [0, 2]

    def test_alias_relations_canonicalized(self, tmp_path):
        p = tmp_path / "kb.jsonl"
        write_kb(p, [("x", "xWant", "y")])
        assert load_kb(p).entries[0].relation == "sWant"

    def test_errors_carry_line_numbers(self, tmp_path):
        p = tmp_path / "kb.jsonl"
        p.write_text('{"head": "a", "relation": "xReact", "tail": "b"}\n{"head": "a"}\n')
        with pytest.raises(DataFormatError, match=":2:"):
            load_kb(p)
        p.write_text('{"head": "a", "relation": "nope", "tail": "b"}\n')
        with pytest.raises(DataFormatError, match="unknown relation"):
            load_kb(p)
        p.write_text("")
        with pytest.raises(DataFormatError):
            load_kb(p)


class TestCosine:
    def test_hand_values(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
        assert abs(cosine(np.array([2.0, 0.0]), np.array([1.0, 0.0])) - 1.0) < 1e-15
        assert cosine(np.zeros(3), np.ones(3)) == 0.0


class FakeKB:
    """Bare-bones stand-in exposing entries/by_relation."""

    def __init__(self, heads, relation="xReact"):
        from todkat.knowledge import KBEntry

        self.entries = [KBEntry(h, relation, "tail of " + h) for h in heads]
        self.by_relation = {relation: list(range(len(heads)))}


class TestRetrieval:
    def test_matches_brute_force_oracle(self):
        r = RngStream(17)
        for trial in range(25):
            rr = r.split("t%d" % trial)
            heads = ["h%d" % i for i in range(12)]
            vecs = {h: rr.split(h).normal((6,)) for h in heads}
            vecs.update({"q": rr.split("q").normal((6,))})
            kb = FakeKB(heads)
            got = retrieve_topk(kb, "xReact", vecs["q"], lambda t: vecs[t.split(" ")[0]] if t.startswith("h") else vecs[t], 4)
            scores = [cosine(vecs["q"], vecs[h]) for h in heads]
            want = sorted(range(12), key=lambda i: (-scores[i], i))[:4]
            assert [i for i, _ in got] == want

    def test_ties_break_to_lower_index(self):
        heads = ["a", "b", "c"]
        vec = np.array([1.0, 0.0])
        kb = FakeKB(heads)
        got = retrieve_topk(kb, "xReact", vec, lambda t: vec, 3)
        assert [i for i, _ in got] == [0, 1, 2]

    def test_short_relation_pads_with_warning(self):
        kb = FakeKB(["only one"])
        v = np.array([1.0, 1.0])
        with pytest.warns(UserWarning, match="padding"):
            got = retrieve_topk(kb, "xReact", v, lambda t: v, 3)
        assert [i for i, _ in got] == [0, 0, 0]

    def test_missing_relation_rejected(self):
        kb = FakeKB(["x"])
        with pytest.raises(ContractError):
            retrieve_topk(kb, "xIntent", np.ones(2), lambda t: np.ones(2), 2)


def toy_generator(tmp_path, n_triples=50, seed=2):
    heads = ["event alpha %02d happened" % i for i in range(n_triples)]
    tails = ["feels kind of way %02d" % i for i in range(n_triples)]
    p = tmp_path / "kb.jsonl"
    write_kb(p, [(h, "xReact", t) for h, t in zip(heads, tails)])
    kb = load_kb(p)
    vocab = build_vocab(
        kb.texts(), extra_tokens=[relation_marker(r) for r in RELATIONS]
    )
    store = ParamStore()
    gen = Seq2SeqGenerator(
        store, GenConfig(vocab_size=len(vocab)), RngStream(seed)
    )
    return kb, vocab, store, gen


class TestGenerator:
    def test_encode_input_layout(self, tmp_path):
        _, vocab, _, gen = toy_generator(tmp_path, 4)
        ids = gen.encode_input("event alpha 00 happened", "xReact", vocab)
        assert ids.shape == (gen.cfg.max_in,)
        assert ids[0] == CLS
        marker = vocab.id_of(relation_marker("xReact"))
        real = ids[ids != PAD]
        assert real[-1] == marker

    def test_beam_width_validated(self, tmp_path):
        _, vocab, _, gen = toy_generator(tmp_path, 4)
        with pytest.raises(ContractError):
            gen.generate("x", "xReact", vocab, 0)

    def test_beams_sorted_and_deterministic(self, tmp_path):
        _, vocab, _, gen = toy_generator(tmp_path, 4)
        outs = gen.generate("event alpha 01 happened", "xReact", vocab, 3)
        assert len(outs) == 3
        lps = [lp for _, lp in outs]
        assert lps == sorted(lps, reverse=True)
        again = gen.generate("event alpha 01 happened", "xReact", vocab, 3)
        assert outs == again

    def test_memorizes_small_kb(self, tmp_path):
        kb, vocab, store, gen = toy_generator(tmp_path, 50)
        train_generator(
            gen, store, kb, vocab, GenTrainConfig(epochs=60, lr=1e-3), RngStream(8)
        )
        hits = sum(
            gen.generate(e.head, e.relation, vocab, 1)[0][0] == e.tail
            for e in kb.entries
        )
        assert hits >= 40, "memorized %d/50" % hits


class TestSourceSelector:
    def setup_method(self):
        self.store = ParamStore()
        self.sel = SourceSelector(self.store, "sel", 8, RngStream(4))

    def test_hard_gate(self):
        assert self.sel.hard_gate(True).data.tolist() == [[1.0, 0.0]]
        assert self.sel.hard_gate(False).data.tolist() == [[0.0, 1.0]]

    def test_sample_is_always_hard_one_hot(self):
        r = RngStream(9)
        score = T.constant(np.array([[0.3]]))
        for i in range(500):
            gate = self.sel.sample_gate(score, 0.5, r.split("g%d" % i).gumbel(2))
            row = gate.data[0]
            assert sorted(row.tolist()) == [0.0, 1.0]

    def test_temperature_validated(self):
        with pytest.raises(ContractError):
            self.sel.sample_gate(T.constant(np.zeros((1, 1))), 0.0, np.zeros(2))

    @pytest.mark.parametrize("p", [0.2, 0.5, 0.8])
    def test_selection_frequency_matches_sigmoid(self, p):
        # argmax of Gumbel-perturbed [s, 0] picks column 0 with
        # probability sigmoid(s) regardless of temperature
        r = RngStream(123)
        s = np.log(p / (1.0 - p))
        score = T.constant(np.array([[s]]))
        n = 10000
        hits = 0
        for i in range(n):
            gate = self.sel.sample_gate(score, 0.5, r.split("p%.1f-%d" % (p, i)).gumbel(2))
            hits += int(gate.data[0, 0] == 1.0)
        assert abs(hits / n - p) < 0.02

    def test_straight_through_gradient_reaches_score_weights(self):
        r = RngStream(5)
        u = T.constant(r.normal((1, 8)))
        e = T.constant(r.normal((1, 8)))
        g = T.constant(r.normal((1, 8)))
        self.store.zero_grad()
        with Tape() as tape:
            score = self.sel.score(u, e, g)
            gate = self.sel.sample_gate(score, 0.5, r.split("gg").gumbel(2))
            loss = T.tsum(T.mul(gate, T.constant(np.array([[0.7, -0.2]]))))
        tape.backward(loss)
        grad = self.store["sel.w.w"].grad
        assert grad is not None and np.abs(grad).max() > 0


class TestKnowledgeFuser:
    def setup_method(self):
        self.store = ParamStore()
        self.fus = KnowledgeFuser(self.store, "fus", 8, 4, RngStream(6))

    def test_alpha_is_a_distribution(self):
        r = RngStream(2)
        cand = T.constant(r.normal((5, 8)))
        fused, alpha = self.fus.fuse_relation(cand, r.normal((4,)), r.normal((8,)))
        assert fused.data.shape == (1, 8)
        assert alpha.data.shape == (1, 5)
        assert abs(alpha.data.sum() - 1.0) <= 1e-12
        assert (alpha.data >= 0).all()

    def test_permutation_equivariance(self):
        # shuffling candidates shuffles alpha and leaves the fused
        # vector unchanged (up to float summation order)
        r = RngStream(3)
        cand = r.normal((5, 8))
        z, u = r.normal((4,)), r.normal((8,))
        perm = r.permutation(5)
        f1, a1 = self.fus.fuse_relation(T.constant(cand), z, u)
        f2, a2 = self.fus.fuse_relation(T.constant(cand[perm]), z, u)
        unshuffled = np.empty(5)
        unshuffled[perm] = a2.data[0]
        assert np.abs(a1.data[0] - unshuffled).max() <= 1e-12
        assert np.abs(f1.data - f2.data).max() <= 1e-12

    def test_three_item_hand_example(self):
        # brute-force recomputation of the fusion formula
        r = RngStream(10)
        cand = r.normal((3, 8))
        z, u = r.normal((4,)), r.normal((8,))
        fused, alpha = self.fus.fuse_relation(T.constant(cand), z, u)
        w = self.store["fus.walpha.w"].data
        v = np.tanh(np.concatenate([cand, np.tile(z, (3, 1))], axis=1) @ w)
        scores = v @ np.concatenate([z, u])
        e = np.exp(scores - scores.max())
        want_alpha = e / e.sum()
        want_fused = want_alpha @ cand
        assert np.abs(alpha.data[0] - want_alpha).max() < 1e-10
        assert np.abs(fused.data[0] - want_fused).max() < 1e-10

    def test_combine_relations_shape_and_determinism(self):
        r = RngStream(11)
        rows = [T.constant(r.normal((1, 8))) for _ in range(3)]
        c1 = self.fus.combine_relations(rows)
        c2 = self.fus.combine_relations(rows)
        assert c1.data.shape == (1, 8)
        assert (c1.data == c2.data).all()

    def test_gradients_flow_to_fusion_weights(self):
        r = RngStream(12)
        self.store.zero_grad()
        with Tape() as tape:
            cand = T.constant(r.normal((4, 8)))
            fused, _ = self.fus.fuse_relation(cand, r.normal((4,)), r.normal((8,)))
            combined = self.fus.combine_relations([fused, fused])
            loss = T.tsum(combined)
        tape.backward(loss)
        for name in ("fus.walpha.w", "fus.rel_attn.wo.w"):
            g = self.store[name].grad
            assert g is not None and np.abs(g).max() > 0, name
