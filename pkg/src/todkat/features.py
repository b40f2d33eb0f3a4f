"""Per-utterance features from the frozen topic model and KB.

After topic training, the LM and VAE are frozen. For every utterance we
precompute its pooled encoding u, its topic vector z (posterior mean),
and its knowledge candidates: the top-k retrieved KB tails per relation
plus k generated tails per relation, with their embeddings. These are
pure data (no gradients), shared across classifier variants and seeds;
only the selection/fusion of candidates is learned downstream.

Text embeddings go through a cache stamped with the parameter store's
version, so a stale cache can never outlive a weight update.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .knowledge import canonical_relation, retrieve_topk
from .lm import CLS, PAD, encode_utterance
from .topicvae import topics_from_encodings


@dataclass
class RelationCandidates:
    retrieved_texts: list
    retrieved_indices: list
    generated_texts: list


@dataclass
class DialogueFeatures:
    """Everything the classifier needs for one dialogue."""

    id: str
    u: np.ndarray  # [n, d_model] pooled utterance encodings
    z: np.ndarray  # [n, d_z] posterior-mean topic vectors
    label_ids: np.ndarray  # [n]
    e_mean: np.ndarray  # [n, d_model] mean retrieved-tail embedding
    g_mean: np.ndarray  # [n, d_model] mean generated-tail embedding
    items: list = None  # per utterance: {relation: RelationCandidates}
    vectors: dict = field(default=None, repr=False)  # shared text -> vec
    utterances: list = None

    @property
    def n(self):
        return self.u.shape[0]

    def candidate_matrix(self, n, relation, source):
        """[k, d_model] embedding matrix for one utterance/relation."""
        cand = self.items[n][relation]
        texts = (
            cand.retrieved_texts if source == "retrieved" else cand.generated_texts
        )
        return np.stack([self.vectors[t] for t in texts])

    def prefix(self, n):
        """The first n utterances as a standalone DialogueFeatures."""
        if not (1 <= n <= self.n):
            raise ContractError("prefix length out of range")
        return DialogueFeatures(
            self.id,
            self.u[:n],
            self.z[:n],
            self.label_ids[:n],
            self.e_mean[:n],
            self.g_mean[:n],
            self.items[:n] if self.items is not None else None,
            self.vectors,
            self.utterances[:n] if self.utterances is not None else None,
        )


class FeatureExtractor:
    """Turns encoded dialogues into DialogueFeatures, caching text
    embeddings and knowledge candidates."""

    def __init__(
        self,
        lm,
        vae,
        store,
        vocab,
        kb=None,
        generator=None,
        relations=(),
        k=5,
    ):
        self.lm = lm
        self.vae = vae
        self.store = store
        self.vocab = vocab
        self.kb = kb
        self.generator = generator
        self.relations = tuple(canonical_relation(r) for r in relations)
        self.k = k
        self._embed_cache = {}
        self._embed_version = store.version
        self._item_cache = {}
        if self.relations and (kb is None or generator is None):
            raise ContractError("knowledge features need a KB and a generator")

    def embed_text(self, text):
        """Similarity vector for arbitrary text, cached until the
        underlying parameters change.

        This is a separate, cheaper embedder than the dialogue encoder:
        the mean of the raw token embeddings (CLS and PAD excluded).
        A bag of near-orthogonal token vectors makes cosine similarity
        track lexical overlap, which is what retrieval needs; contextual
        states mix positions too aggressively for that."""
        if self.store.version != self._embed_version:
            self._embed_cache.clear()
            self._item_cache.clear()
            self._embed_version = self.store.version
        vec = self._embed_cache.get(text)
        if vec is None:
            ids = encode_utterance(text, self.vocab, self.lm.cfg.max_tokens)
            table = self.store["lm.embed.table"].data
            real = ids[1:][ids[1:] != PAD]
            if real.size:
                vec = table[real].mean(axis=0)
            else:
                vec = table[CLS].copy()
            self._embed_cache[text] = vec
        return vec

    def knowledge_candidates(self, text):
        """{relation: RelationCandidates} for one utterance text."""
        key = text
        hit = self._item_cache.get(key)
        if hit is not None:
            return hit
        query = self.embed_text(text)
        out = {}
        for rel in self.relations:
            picked = retrieve_topk(
                self.kb, rel, query, self.embed_text, self.k
            )
            ret_texts = [e.tail for _, e in picked]
            ret_idx = [i for i, _ in picked]
            gen = self.generator.generate(text, rel, self.vocab, self.k)
            gen_texts = [g for g, _ in gen]
            for t in ret_texts + gen_texts:
                self.embed_text(t)
            out[rel] = RelationCandidates(ret_texts, ret_idx, gen_texts)
        self._item_cache[key] = out
        return out

    def extract(self, enc_dialogue, utterance_texts=None):
        """DialogueFeatures for one EncodedDialogue."""
        encs = [self.lm.encode_lower(row) for row in enc_dialogue.id_rows]
        u = np.stack([e.pooled.data[0] for e in encs])
        z = topics_from_encodings(self.vae, encs)
        n = len(encs)
        d = u.shape[1]
        e_mean = np.zeros((n, d))
        g_mean = np.zeros((n, d))
        items = None
        if self.relations:
            if utterance_texts is None:
                raise ContractError(
                    "knowledge features need the raw utterance texts"
                )
            items = []
            for i, text in enumerate(utterance_texts):
                cands = self.knowledge_candidates(text)
                items.append(cands)
                ret_vecs = []
                gen_vecs = []
                for rel in self.relations:
                    ret_vecs += [
                        self._embed_cache[t] for t in cands[rel].retrieved_texts
                    ]
                    gen_vecs += [
                        self._embed_cache[t] for t in cands[rel].generated_texts
                    ]
                e_mean[i] = np.mean(ret_vecs, axis=0)
                g_mean[i] = np.mean(gen_vecs, axis=0)
        return DialogueFeatures(
            enc_dialogue.id,
            u,
            z,
            enc_dialogue.label_ids.copy(),
            e_mean,
            g_mean,
            items,
            self._embed_cache,
            list(utterance_texts) if utterance_texts is not None else None,
        )

    def extract_corpus(self, enc_dialogues, dialogues=None):
        """Features for a whole split; ``dialogues`` supplies raw texts
        when knowledge relations are active."""
        out = []
        for i, enc in enumerate(enc_dialogues):
            texts = None
            if self.relations:
                if dialogues is None:
                    raise ContractError("need raw dialogues for KB features")
                texts = dialogues[i].utterances[: enc.n_real]
            out.append(self.extract(enc, texts))
        return out
