"""Dialogue corpora: JSONL I/O, synthetic generation, batching.

Corpus files are JSON Lines, one dialogue per line:

    {"id": "...", "speakers": ["a", "b", ...],
     "utterances": ["...", ...], "labels": ["happiness", ...]}

``speakers`` is optional; the other three are required and utterances
and labels must have equal length.

The synthetic generator builds topic-coherent dialogues: every dialogue
draws one topic; its utterances mix shared function words, words from
the topic's private vocabulary block, and (usually) a phrase that also
appears as a head in the bundled knowledge base. With probability rho
an utterance's label is the topic's signature emotion, otherwise it is
uniform over the remaining labels.
"""

import json
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractError, DataFormatError
from .lm import CLS, NULL, PAD, encode_utterance

# words that appear in every topic, carrying no signal
FUNCTION_WORDS = [
    "the", "a", "to", "and", "of", "i", "you", "it", "is", "was",
    "that", "we", "so", "on", "in", "for", "my", "me", "they", "he",
    "she", "but", "with", "at", "this", "just", "have", "had", "been",
    "really",
]


@dataclass
class Dialogue:
    id: str
    utterances: list
    labels: list
    speakers: list = None

    def __len__(self):
        return len(self.utterances)


def load_corpus(path, label_set=None):
    """Read a JSONL corpus; errors carry 1-based line numbers."""
    dialogues = []
    seen = set()
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
            for key in ("id", "utterances", "labels"):
                if key not in rec:
                    raise DataFormatError(
                        "%s:%d: missing field %r" % (path, ln, key)
                    )
            utts, labels = rec["utterances"], rec["labels"]
            if not utts:
                raise DataFormatError("%s:%d: empty dialogue" % (path, ln))
            if len(utts) != len(labels):
                raise DataFormatError(
                    "%s:%d: %d utterances but %d labels"
                    % (path, ln, len(utts), len(labels))
                )
            if any(not isinstance(u, str) or not u.strip() for u in utts):
                raise DataFormatError(
                    "%s:%d: utterances must be non-empty strings" % (path, ln)
                )
            speakers = rec.get("speakers")
            if speakers is not None and len(speakers) != len(utts):
                raise DataFormatError(
                    "%s:%d: speakers length mismatch" % (path, ln)
                )
            if label_set is not None:
                bad = [l for l in labels if l not in label_set]
                if bad:
                    raise DataFormatError(
                        "%s:%d: unknown label %r" % (path, ln, bad[0])
                    )
            if rec["id"] in seen:
                raise DataFormatError(
                    "%s:%d: duplicate dialogue id %r" % (path, ln, rec["id"])
                )
            seen.add(rec["id"])
            dialogues.append(
                Dialogue(rec["id"], list(utts), list(labels), speakers)
            )
    if not dialogues:
        raise DataFormatError("%s: no dialogues found" % path)
    return dialogues


def save_corpus(dialogues, path):
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogues:
            rec = {"id": d.id, "utterances": d.utterances, "labels": d.labels}
            if d.speakers is not None:
                rec["speakers"] = d.speakers
            f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus generator."""

    n_topics: int = 2
    n_dialogues: int = 1000
    min_utterances: int = 4
    max_utterances: int = 8
    rho: float = 0.9  # P(label == topic signature)
    words_per_topic: int = 40
    shared_words: int = 40
    topic_purity: float = 1.0  # P(content word comes from the topic list)
    content_min: int = 2
    content_max: int = 4
    function_min: int = 3
    function_max: int = 6
    kb_head_rate: float = 0.75
    labels: tuple = ("happiness", "sadness", "neutral")
    signatures: tuple = ("happiness", "sadness")
    kb_heads: tuple = ()  # one tuple of head phrases per topic
    splits: tuple = (0.7, 0.15, 0.15)

    def validate(self):
        if self.n_topics < 1:
            raise ContractError("n_topics must be >= 1")
        if not (0.0 <= self.rho <= 1.0):
            raise ContractError("rho must lie in [0, 1]")
        if len(self.signatures) != self.n_topics:
            raise ContractError("need one signature emotion per topic")
        if any(s not in self.labels for s in self.signatures):
            raise ContractError("signatures must be drawn from labels")
        if len(self.labels) < 2:
            raise ContractError("need at least two labels")
        if not (1 <= self.min_utterances <= self.max_utterances):
            raise ContractError("bad utterance count range")
        if not (0.0 <= self.topic_purity <= 1.0):
            raise ContractError("topic_purity must lie in [0, 1]")
        if self.topic_purity < 1.0 and self.shared_words < 1:
            raise ContractError("shared_words must be >= 1 when impure")
        if self.kb_heads and len(self.kb_heads) != self.n_topics:
            raise ContractError("kb_heads must have one entry per topic")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ContractError("split fractions must sum to 1")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def topic_word(topic, j):
    return "t%dw%02d" % (topic, j)


def shared_word(j):
    return "sw%02d" % j


def _make_utterance(cfg, topic, label, rng):
    """One utterance: function + topic words, and, for emotion-bearing
    labels, maybe an event phrase from the KB block matching the label.

    The event phrase follows the LABEL, not the dialogue topic: an
    utterance that breaks with the dialogue's mood mentions an event of
    its own valence. Knowledge lookup over the phrase is therefore
    per-utterance evidence that topic information alone cannot give.
    Neutral utterances mention no event.
    """
    k_f = int(rng.integers(cfg.function_min, cfg.function_max + 1))
    k_c = int(rng.integers(cfg.content_min, cfg.content_max + 1))
    words = [
        FUNCTION_WORDS[i]
        for i in rng.choice(len(FUNCTION_WORDS), size=k_f)
    ]
    for _ in range(k_c):
        if cfg.topic_purity >= 1.0 or rng.uniform(0.0, 1.0) < cfg.topic_purity:
            words.append(topic_word(topic, int(rng.integers(0, cfg.words_per_topic))))
        else:
            words.append(shared_word(int(rng.integers(0, cfg.shared_words))))
    perm = rng.permutation(len(words))
    words = [words[i] for i in perm]
    if cfg.kb_heads and label in cfg.signatures:
        if rng.uniform(0.0, 1.0) < cfg.kb_head_rate:
            heads = cfg.kb_heads[cfg.signatures.index(label)]
            phrase = heads[int(rng.integers(0, len(heads)))]
            slot = int(rng.integers(0, len(words) + 1))
            words = words[:slot] + [phrase] + words[slot:]
    return " ".join(words)


def _make_label(cfg, topic, rng):
    sig = cfg.signatures[topic]
    if rng.uniform(0.0, 1.0) < cfg.rho:
        return sig
    others = [l for l in cfg.labels if l != sig]
    return others[int(rng.integers(0, len(others)))]


def generate_corpus(cfg, rng):
    """Synthesize train/dev/test splits. ``rng`` is an RngStream; the
    same seed always yields byte-identical corpora."""
    cfg.validate()
    counts = [int(round(frac * cfg.n_dialogues)) for frac in cfg.splits]
    counts[0] = cfg.n_dialogues - sum(counts[1:])
    out = {}
    for split, count in zip(("train", "dev", "test"), counts):
        srng = rng.split(split).generator
        dialogues = []
        for i in range(count):
            topic = int(srng.integers(0, cfg.n_topics))
            n = int(srng.integers(cfg.min_utterances, cfg.max_utterances + 1))
            labels = [_make_label(cfg, topic, srng) for _ in range(n)]
            utts = [
                _make_utterance(cfg, topic, labels[j], srng) for j in range(n)
            ]
            speakers = ["a" if j % 2 == 0 else "b" for j in range(n)]
            dialogues.append(
                Dialogue("%s-%05d" % (split, i), utts, labels, speakers)
            )
        out[split] = dialogues
    return out


@dataclass
class EncodedDialogue:
    """Token ids and label ids for one dialogue, truncated to the
    maximum dialogue length (a warning counts truncations)."""

    id: str
    id_rows: list  # n_real arrays of shape [max_tokens], int64
    label_ids: np.ndarray  # [n_real] int64
    n_real: int
    truncated: bool = False
    labels: list = field(default_factory=list)


def encode_dialogues(dialogues, vocab, label_names, max_tokens, max_dialogue_length):
    """Tokenize a corpus; overlong dialogues are truncated with one
    summary warning."""
    label_to_id = {name: i for i, name in enumerate(label_names)}
    out = []
    n_trunc = 0
    for d in dialogues:
        utts, labels = d.utterances, d.labels
        truncated = False
        if len(utts) > max_dialogue_length:
            utts = utts[:max_dialogue_length]
            labels = labels[:max_dialogue_length]
            truncated = True
            n_trunc += 1
        try:
            lab_ids = np.asarray(
                [label_to_id[l] for l in labels], dtype=np.int64
            )
        except KeyError as exc:
            raise DataFormatError(
                "dialogue %s: unknown label %s" % (d.id, exc)
            ) from None
        rows = [encode_utterance(u, vocab, max_tokens) for u in utts]
        out.append(
            EncodedDialogue(d.id, rows, lab_ids, len(rows), truncated, list(labels))
        )
    if n_trunc:
        warnings.warn(
            "%d dialogue(s) truncated to %d utterances"
            % (n_trunc, max_dialogue_length)
        )
    return out


def null_row(max_tokens):
    """Id row for a padding (non-)utterance: CLS, NULL marker, PADs."""
    row = np.full(max_tokens, PAD, dtype=np.int64)
    row[0] = CLS
    row[1] = NULL
    return row


def pad_dialogue(enc, max_dialogue_length):
    """Pad an EncodedDialogue's rows with NULL utterances up to the
    fixed length. Returns (rows, mask) where mask marks real
    utterances; a full-length dialogue comes back unchanged."""
    if enc.n_real > max_dialogue_length:
        raise ContractError("dialogue longer than max_dialogue_length")
    rows = list(enc.id_rows)
    mask = np.zeros(max_dialogue_length, dtype=bool)
    mask[: enc.n_real] = True
    if rows:
        width = rows[0].shape[0]
    else:
        raise ContractError("dialogue has no utterances")
    while len(rows) < max_dialogue_length:
        rows.append(null_row(width))
    return rows, mask
