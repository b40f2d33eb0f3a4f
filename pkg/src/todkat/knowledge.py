"""Commonsense knowledge: retrieval, generation, selection, fusion.

A knowledge base is JSONL with records {"head", "relation", "tail"}.
For an utterance we either retrieve tails whose heads are close to the
utterance in the frozen encoder's embedding space, or generate tails
with a small sequence-to-sequence model trained on the KB. A learned
pointer picks between the two sources per utterance (hard choice via
straight-through Gumbel-softmax during training), and per-relation
attention fuses the chosen candidates into one knowledge vector.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataFormatError
from .lm import BOS, CLS, EOS, NULL, PAD, RESERVED, tokenize
from .nn import (
    DecoderBlock,
    Embedding,
    EncoderBlock,
    Linear,
    MultiHeadAttention,
    blocked_for_keys,
    causal_blocked,
    sinusoid_positions,
)
from .numerics import AdamState, Tape, adam_step
from .numerics import tensor as T
from .numerics.tensor import Tensor

RELATIONS = (
    "xIntent",
    "xReact",
    "oReact",
    "sNeed",
    "sWant",
    "oWant",
    "sEffect",
    "oEffect",
    "sAttr",
)
# historical names map onto the subject-prefixed forms
RELATION_ALIASES = {
    "xNeed": "sNeed",
    "xWant": "sWant",
    "xEffect": "sEffect",
    "xAttr": "sAttr",
}
DEFAULT_RELATIONS = ("xIntent", "xReact", "oReact")


def canonical_relation(name):
    name = RELATION_ALIASES.get(name, name)
    if name not in RELATIONS:
        raise DataFormatError("unknown relation %r" % name)
    return name


def relation_marker(relation):
    """The vocab token that tags a relation in generator inputs."""
    return "<%s>" % relation.lower()


@dataclass
class KBEntry:
    head: str
    relation: str
    tail: str


class KnowledgeBase:
    def __init__(self, entries):
        if not entries:
            raise DataFormatError("knowledge base is empty")
        self.entries = entries
        self.by_relation = {}
        for i, e in enumerate(entries):
            self.by_relation.setdefault(e.relation, []).append(i)

    def __len__(self):
        return len(self.entries)

    def heads(self):
        seen = {}
        for e in self.entries:
            seen.setdefault(e.head, None)
        return list(seen)

    def texts(self):
        out = []
        for e in self.entries:
            out.append(e.head)
            out.append(e.tail)
        return out


def load_kb(path):
    """Parse and validate a JSONL knowledge base."""
    entries = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(
                    "%s:%d: invalid JSON (%s)" % (path, ln, exc)
                ) from None
            for key in ("head", "relation", "tail"):
                if key not in rec or not isinstance(rec[key], str) or not rec[key].strip():
                    raise DataFormatError(
                        "%s:%d: missing or empty field %r" % (path, ln, key)
                    )
            try:
                rel = canonical_relation(rec["relation"])
            except DataFormatError:
                raise DataFormatError(
                    "%s:%d: unknown relation %r" % (path, ln, rec["relation"])
                ) from None
            entries.append(KBEntry(rec["head"].strip(), rel, rec["tail"].strip()))
    if not entries:
        raise DataFormatError("%s: no entries found" % path)
    return KnowledgeBase(entries)


def cosine(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def retrieve_topk(kb, relation, query_vec, head_vec_fn, k):
    """Top-k entries for one relation by cosine(head, query).

    Ties break toward the lower entry index. If the relation has fewer
    than k entries the result is padded by repeating from the best one
    down, with a warning. No entries at all is a contract error.
    """
    relation = canonical_relation(relation)
    idxs = kb.by_relation.get(relation)
    if not idxs:
        raise ContractError("no KB entries for relation %s" % relation)
    scores = np.array(
        [cosine(query_vec, head_vec_fn(kb.entries[i].head)) for i in idxs]
    )
    order = np.argsort(-scores, kind="stable")
    ranked = [idxs[int(o)] for o in order]
    if len(ranked) < k:
        warnings.warn(
            "relation %s has %d entries, padding to k=%d by repetition"
            % (relation, len(ranked), k)
        )
        reps = [ranked[i % len(ranked)] for i in range(k)]
        ranked = reps
    picked = ranked[:k]
    return [(i, kb.entries[i]) for i in picked]


# ------------------------------------------------------------ the generator


@dataclass
class GenConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    max_in: int = 16
    max_out: int = 10


class Seq2SeqGenerator:
    """Tiny encoder-decoder that maps (head phrase, relation) to a tail
    phrase; stands in for a pretrained commonsense generator."""

    def __init__(self, store, cfg, rng):
        self.cfg = cfg
        self.embed = Embedding(store, "gen.embed", cfg.vocab_size, cfg.d_model, rng)
        self.enc = EncoderBlock(
            store, "gen.enc", cfg.d_model, cfg.n_heads, cfg.d_ff, rng
        )
        self.dec = DecoderBlock(
            store, "gen.dec", cfg.d_model, cfg.n_heads, cfg.d_ff, rng
        )
        self.out = Linear(store, "gen.out", cfg.d_model, cfg.vocab_size, rng)

    def encode_input(self, text, relation, vocab):
        """[CLS] head tokens [relation marker], truncated and padded."""
        marker = vocab.id_of(relation_marker(canonical_relation(relation)))
        ids = [vocab.id_of(t) for t in tokenize(text)]
        return self._assemble(ids, marker)

    def _assemble(self, ids, marker):
        ids = [CLS] + list(ids)
        ids = ids[: self.cfg.max_in - 1] + [marker]
        ids += [PAD] * (self.cfg.max_in - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def _encode(self, in_ids):
        t = in_ids.shape[0]
        valid = in_ids != PAD
        x = T.add(self.embed(in_ids), sinusoid_positions(t, self.cfg.d_model))
        return self.enc(x, blocked_for_keys(t, valid)), valid

    def _decode_states(self, dec_ids, enc_states, enc_valid):
        t = dec_ids.shape[0]
        s = T.add(self.embed(dec_ids), sinusoid_positions(t, self.cfg.d_model))
        s = self.dec(
            s,
            enc_states,
            causal_blocked(t),
            blocked_for_keys(t, enc_valid),
        )
        return self.out(s)

    def loss(self, in_ids, tail_ids):
        """Teacher-forced NLL of one triple; tail_ids end with EOS."""
        enc_states, enc_valid = self._encode(in_ids)
        dec_in = np.concatenate([[BOS], tail_ids[:-1]]).astype(np.int64)
        logits = self._decode_states(dec_in, enc_states, enc_valid)
        losses = T.cross_entropy_rows(logits, tail_ids, ignore_id=PAD)
        return T.tsum(losses)

    def generate(self, text, relation, vocab, k, max_len=None):
        """Beam search with width k; returns k (tail_text, logprob)
        pairs, best first. k=1 is greedy decoding."""
        if k < 1:
            raise ContractError("beam width must be >= 1")
        max_len = max_len or self.cfg.max_out
        in_ids = self.encode_input(text, relation, vocab)
        enc_states, enc_valid = self._encode(in_ids)
        beams = [([], 0.0, False)]  # (token ids, logprob, done)
        for _ in range(max_len):
            if all(done for _, _, done in beams):
                break
            candidates = []
            for tokens, lp, done in beams:
                if done:
                    candidates.append((tokens, lp, True))
                    continue
                dec_in = np.asarray([BOS] + tokens, dtype=np.int64)
                logits = self._decode_states(dec_in, enc_states, enc_valid)
                row = logits.data[-1]
                row = row - row.max()
                logp = row - np.log(np.exp(row).sum())
                # skip structural ids; take enough to still fill k slots
                top = np.argsort(-logp, kind="stable")[: k + 4]
                for tid in top:
                    tid = int(tid)
                    if tid in (PAD, CLS, BOS, NULL):
                        continue
                    if tid == EOS:
                        candidates.append((tokens, lp + float(logp[tid]), True))
                    else:
                        candidates.append(
                            (tokens + [tid], lp + float(logp[tid]), False)
                        )
            candidates.sort(key=lambda c: (-c[1], c[0]))
            beams = candidates[:k]
        results = []
        for tokens, lp, _ in beams:
            words = [vocab.token_of(t) for t in tokens]
            results.append((" ".join(words), lp))
        while len(results) < k:
            results.append(results[-1] if results else ("", -np.inf))
        return results


@dataclass
class GenTrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    # extra jittered copies of every triple per epoch; distractor tokens
    # are mixed into the head so the generator stays usable on whole
    # utterances instead of bare event phrases
    noise_copies: int = 1
    noise_lo: int = 2
    noise_hi: int = 6


def _jitter_head(head_ids, vocab, cfg, rng):
    """Head token ids with random non-reserved tokens mixed in."""
    floor = len(RESERVED)
    if len(vocab) <= floor:
        return list(head_ids)
    out = list(head_ids)
    for _ in range(int(rng.integers(cfg.noise_lo, cfg.noise_hi + 1))):
        tok = int(rng.integers(floor, len(vocab)))
        slot = int(rng.integers(0, len(out) + 1))
        out.insert(slot, tok)
    return out


def train_generator(gen, store, kb, vocab, cfg, rng):
    """Fit the generator on all KB triples until it can reproduce them;
    returns per-epoch mean NLL over every trained copy."""
    heads, pairs = [], []
    for e in kb.entries:
        marker = vocab.id_of(relation_marker(canonical_relation(e.relation)))
        head_ids = [vocab.id_of(t) for t in tokenize(e.head)]
        tail = [vocab.id_of(t) for t in tokenize(e.tail)]
        tail = tail[: gen.cfg.max_out - 1] + [EOS]
        heads.append((head_ids, marker))
        pairs.append((gen._assemble(head_ids, marker), np.asarray(tail, dtype=np.int64)))
    adam = AdamState(lr=cfg.lr)
    order_rng = rng.split("order")
    noise_rng = rng.split("noise")
    n_clean = len(pairs)
    n_total = n_clean * (1 + max(cfg.noise_copies, 0))
    history = []
    for epoch in range(cfg.epochs):
        erng = noise_rng.split("e%d" % epoch)
        order = order_rng.split("e%d" % epoch).permutation(n_total)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            store.zero_grad()
            with Tape() as tape:
                loss = None
                for pi in chunk:
                    pi = int(pi)
                    in_ids, tail_ids = pairs[pi % n_clean]
                    if pi >= n_clean:
                        head_ids, marker = heads[pi % n_clean]
                        noisy = _jitter_head(
                            head_ids, vocab, cfg, erng.split("p%d" % pi)
                        )
                        in_ids = gen._assemble(noisy, marker)
                    one = gen.loss(in_ids, tail_ids)
                    loss = one if loss is None else T.add(loss, one)
            total += loss.item()
            tape.backward(loss)
            adam_step(store.arrays(), store.grads(), adam)
            store.bump()
        history.append(total / n_total)
    return history


# --------------------------------------------- source selection and fusion


class SourceSelector:
    """Pointer between retrieved and generated knowledge.

    The raw score s = [u, e_mean, g_mean] W_sigma defines
    P(retrieved) = sigmoid(s); sampling uses a 2-way Gumbel-softmax
    over logits [s, 0], whose argmax equals 1 with probability
    sigmoid(s) exactly.
    """

    def __init__(self, store, name, d_model, rng):
        self.w = Linear(store, name + ".w", 3 * d_model, 1, rng, bias=False)

    def score(self, u, e_mean, g_mean):
        return self.w(T.concat([u, e_mean, g_mean], axis=1))

    def sample_gate(self, score, tau, gumbel_pair):
        """Hard straight-through gate [1, 2]: value is one-hot, the
        gradient is the tempered softmax's. Column 0 gates retrieval."""
        if tau <= 0:
            raise ContractError("temperature must be positive")
        g = np.asarray(gumbel_pair, dtype=np.float64).reshape(1, 2)
        logits = T.concat([score, T.constant(np.zeros((1, 1)))], axis=1)
        noisy = T.mul_scalar(T.add(logits, T.constant(g)), 1.0 / tau)
        soft = T.softmax(noisy)
        hard = np.zeros((1, 2))
        hard[0, int(np.argmax(soft.data[0]))] = 1.0
        return T.add(T.constant(hard - soft.data), soft)

    @staticmethod
    def hard_gate(retrieved):
        """Deterministic gate for inference."""
        hard = np.zeros((1, 2))
        hard[0, 0 if retrieved else 1] = 1.0
        return T.constant(hard)


class KnowledgeFuser:
    """Attention fusion of candidate tails into one vector.

    Per relation: v_k = tanh([c_k, z]) W_alpha, attention logits
    v_k [z, u]^T, softmax over the k candidates, then a single-head
    self-attention across the per-relation vectors, mean-pooled.
    """

    def __init__(self, store, name, d_model, d_z, rng):
        self.d_model = d_model
        self.d_z = d_z
        self.walpha = Linear(
            store, name + ".walpha", d_model + d_z, d_z + d_model, rng, bias=False
        )
        self.rel_attn = MultiHeadAttention(
            store, name + ".rel_attn", d_model, 1, rng
        )

    def fuse_relation(self, cand, z_row, u_row):
        """cand: Tensor [k, d]; z_row [d_z], u_row [d] ndarrays.
        Returns (fused [1, d], alpha [1, k])."""
        k = cand.shape[0]
        zrep = T.constant(np.tile(np.asarray(z_row, dtype=np.float64), (k, 1)))
        v = T.tanh(self.walpha(T.concat([cand, zrep], axis=1)))
        query = T.constant(
            np.concatenate([z_row, u_row]).reshape(1, -1)
        )
        scores = T.matmul(v, query, False, True)  # [k, 1]
        alpha = T.softmax(T.transpose(scores))  # [1, k]
        fused = T.matmul(alpha, cand)
        return fused, alpha

    def combine_relations(self, fused_rows):
        """Self-attention over the per-relation vectors, mean-pooled to
        a single [1, d] knowledge vector."""
        r = T.concat(fused_rows, axis=0)
        mixed = self.rel_attn(r, r, r)
        pooled = T.mul_scalar(T.tsum(mixed, axis=0), 1.0 / r.shape[0])
        return T.reshape(pooled, (1, self.d_model))
