"""Split transformer language model over utterances.

The lower stack is a bidirectional encoder producing per-token states
and a pooled CLS vector for each utterance. The upper stack is a small
decoder used only while training the topic model: it reconstructs the
utterance tokens conditioned on a latent vector z, which is injected as
an always-visible memory row prepended to the key/value sequence of
every attention block in the upper layers.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataFormatError
from .nn import (
    DecoderBlock,
    Embedding,
    EncoderBlock,
    Linear,
    blocked_for_keys,
    causal_blocked,
    sinusoid_positions,
)
from .numerics import tensor as T

PAD, CLS, UNK, BOS, EOS, NULL = 0, 1, 2, 3, 4, 5
RESERVED = ["<pad>", "<cls>", "<unk>", "<bos>", "<eos>", "<null>"]

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text):
    """Lowercase split on whitespace; punctuation marks become tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token <-> id table. Ids 0..5 are reserved (PAD, CLS, UNK, BOS,
    EOS, NULL-utterance marker); file format is one token per line with
    the line number as id."""

    def __init__(self, tokens):
        if list(tokens[: len(RESERVED)]) != RESERVED:
            raise ContractError(
                "vocab must start with the reserved tokens %s" % RESERVED
            )
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ContractError("vocab contains duplicate tokens")

    def __len__(self):
        return len(self._tokens)

    def id_of(self, token):
        return self._ids.get(token, UNK)

    def token_of(self, idx):
        return self._tokens[idx]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self._tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        if not tokens:
            raise DataFormatError("%s: empty vocab file" % path)
        if tokens[: len(RESERVED)] != RESERVED:
            raise DataFormatError(
                "%s: reserved tokens missing or out of order" % path
            )
        return cls(tokens)


def build_vocab(texts, max_size=None, min_freq=1, extra_tokens=()):
    """Frequency-sorted vocab over tokenized texts, reserved ids first.
    Ties break lexicographically so builds are deterministic.

    extra_tokens enter as whole symbols right after the reserved block
    (relation markers and the like, which the tokenizer would split).
    """
    counts = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    extra = [t for t in extra_tokens if t not in RESERVED]
    items = [
        (tok, c)
        for tok, c in counts.items()
        if c >= min_freq and tok not in RESERVED and tok not in extra
    ]
    items.sort(key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        items = items[: max(0, max_size - len(RESERVED) - len(extra))]
    return Vocab(RESERVED + extra + [tok for tok, _ in items])


def encode_utterance(text, vocab, max_tokens):
    """CLS-prefixed, truncated, PAD-filled id row for one utterance."""
    if max_tokens < 2:
        raise ContractError("max_tokens must be at least 2")
    ids = [CLS] + [vocab.id_of(t) for t in tokenize(text)]
    ids = ids[:max_tokens]
    ids += [PAD] * (max_tokens - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_lower: int = 2
    n_upper: int = 2
    d_ff: int = 128
    d_z: int = 16
    max_tokens: int = 128


@dataclass
class UtteranceEncoding:
    """Lower-stack output for one utterance."""

    token_states: object  # Tensor [t, d_model]
    pooled: object  # Tensor [1, d_model], the CLS row
    valid: np.ndarray  # bool [t], False at PAD positions
    ids: np.ndarray = field(repr=False, default=None)


class SplitLM:
    """Lower encoder + upper latent-conditioned reconstruction decoder."""

    def __init__(self, store, cfg, rng):
        self.cfg = cfg
        self.embed = Embedding(store, "lm.embed", cfg.vocab_size, cfg.d_model, rng)
        self.lower = [
            EncoderBlock(
                store, "lm.lower.%d" % i, cfg.d_model, cfg.n_heads, cfg.d_ff, rng
            )
            for i in range(cfg.n_lower)
        ]
        self.upper = [
            DecoderBlock(
                store, "lm.upper.%d" % i, cfg.d_model, cfg.n_heads, cfg.d_ff, rng
            )
            for i in range(cfg.n_upper)
        ]
        self.zproj = Linear(store, "lm.upper.zproj", cfg.d_z, cfg.d_model, rng)
        self.out = Linear(store, "lm.upper.out", cfg.d_model, cfg.vocab_size, rng)

    def encode_lower(self, ids):
        """Bidirectional encoding of one utterance id row.

        PAD keys are masked out of every attention; PAD positions still
        produce (unused) states. Returns an UtteranceEncoding.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ContractError("encode_lower takes a single id row")
        if ids.shape[0] > self.cfg.max_tokens:
            raise ContractError(
                "utterance length %d exceeds max_tokens %d"
                % (ids.shape[0], self.cfg.max_tokens)
            )
        if ids.shape[0] < 1 or ids[0] != CLS:
            raise ContractError("utterance rows must start with CLS")
        t = ids.shape[0]
        valid = ids != PAD
        x = T.add(self.embed(ids), sinusoid_positions(t, self.cfg.d_model))
        blocked = blocked_for_keys(t, valid)
        for block in self.lower:
            x = block(x, blocked)
        pooled = T.take_rows(x, 0, 1)
        return UtteranceEncoding(x, pooled, valid, ids)

    def decode_upper(self, z, enc, dec_in_drop=None, memory_drop=None):
        """Reconstruction pass: predict the utterance tokens from a
        latent z and the lower-stack token states.

        The decoder input at step t is the embedded previous token
        (BOS first), so logits at position t never see tokens > t; the
        projected z is prepended to the keys/values of both the self-
        and cross-attention of every upper block. Returns
        (logits [t-1, vocab], summed token NLL, n_real_tokens).

        dec_in_drop ([t-1] bool) replaces decoder input tokens with UNK
        and memory_drop ([t] bool) hides token states from the cross
        attention. Both default to no corruption; training uses them to
        close the copy paths that would let reconstruction ignore z.
        """
        ids = enc.ids
        t = ids.shape[0]
        if t < 2:
            raise ContractError("need at least one target position")
        dec_in = np.concatenate([[BOS], ids[1 : t - 1]]).astype(np.int64)
        if dec_in_drop is not None:
            dec_in = np.where(dec_in_drop, UNK, dec_in)
        targets = ids[1:t].astype(np.int64)
        z_mem = self.zproj(z)
        s = T.add(
            self.embed(dec_in), sinusoid_positions(t - 1, self.cfg.d_model)
        )
        self_blocked = causal_blocked(t - 1)
        mem_valid = enc.valid
        if memory_drop is not None:
            mem_valid = mem_valid & ~np.asarray(memory_drop, dtype=bool)
        cross_blocked = blocked_for_keys(t - 1, mem_valid)
        for block in self.upper:
            s = block(
                s,
                enc.token_states,
                self_blocked,
                cross_blocked,
                self_prefix=z_mem,
                cross_prefix=z_mem,
            )
        logits = self.out(s)
        losses = T.cross_entropy_rows(logits, targets, ignore_id=PAD)
        n_real = int((targets != PAD).sum())
        return logits, T.tsum(losses), n_real
