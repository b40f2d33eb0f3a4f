"""Emotion classifier over dialogue step features.

Each utterance contributes a step feature [u_n, z_n, c_n]: its pooled
encoding, its topic vector, and a fused knowledge vector chosen between
retrieved and generated candidates by a learned pointer. A causal
encoder contextualizes the steps (position n sees only <= n); a decoder
predicts the label sequence autoregressively, its cross-attention
banded so step n reads encoder states <= n only. Trained with teacher
forcing, decoded greedily.

Ablations are config switches: use_topics=False zeroes z everywhere it
is read (step feature and fusion query); use_kb=False zeroes c and
never touches the KB; force_source pins the pointer to one side.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, TrainingDivergedError
from .knowledge import DEFAULT_RELATIONS, KnowledgeFuser, SourceSelector
from .nn import (
    DecoderBlock,
    Embedding,
    EncoderBlock,
    LayerNorm,
    Linear,
    causal_blocked,
    sinusoid_positions,
)
from .numerics import AdamState, Tape, adam_step
from .numerics import tensor as T


@dataclass
class ClfConfig:
    n_labels: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 1
    n_decoder_layers: int = 2
    d_ff: int = 128
    d_z: int = 16
    max_dialogue_length: int = 36
    relations: tuple = DEFAULT_RELATIONS
    k: int = 5
    tau: float = 0.5
    use_topics: bool = True
    use_kb: bool = True
    force_source: str = None  # None | "retrieved" | "generated"

    @property
    def d_feature(self):
        return 2 * self.d_model + self.d_z

    def validate(self):
        if self.force_source not in (None, "retrieved", "generated"):
            raise ContractError("force_source must be retrieved/generated")
        if self.n_labels < 2:
            raise ContractError("need at least two labels")


class EmotionClassifier:
    """Knowledge head + causal encoder + label decoder on one store."""

    def __init__(self, store, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.selector = SourceSelector(store, "know.select", d, rng)
        self.fuser = KnowledgeFuser(store, "know.fuse", d, cfg.d_z, rng)
        # the three blocks arrive at very different scales (u is already
        # layer-normed, z and c are small); per-block norms stop the
        # encoder from seeing only u
        self.norm_u = LayerNorm(store, "clf.norm_u", d)
        self.norm_z = LayerNorm(store, "clf.norm_z", cfg.d_z)
        self.norm_c = LayerNorm(store, "clf.norm_c", d)
        self.in_proj = Linear(store, "clf.in_proj", cfg.d_feature, d, rng)
        self.enc_blocks = [
            EncoderBlock(store, "clf.enc.%d" % i, d, cfg.n_heads, cfg.d_ff, rng)
            for i in range(cfg.n_encoder_layers)
        ]
        self.label_embed = Embedding(
            store, "clf.label_embed", cfg.n_labels + 1, d, rng
        )
        self.bos_label = cfg.n_labels  # last embedding row starts decoding
        self.dec_blocks = [
            DecoderBlock(store, "clf.dec.%d" % i, d, cfg.n_heads, cfg.d_ff, rng)
            for i in range(cfg.n_decoder_layers)
        ]
        self.head = Linear(store, "clf.head", d, cfg.n_labels, rng)

    # ------------------------------------------------------------ features

    def _knowledge_vector(self, bundle, n, z_row, gumbel_rng, collect=None):
        """Fused knowledge vector c_n as a tensor on the active tape.

        gumbel_rng None means deterministic inference: the source is
        retrieved iff sigmoid(score) >= 0.5. With use_kb off, returns a
        zero constant without reading any candidate.
        """
        cfg = self.cfg
        if not cfg.use_kb:
            return T.constant(np.zeros((1, cfg.d_model)))
        u_row = bundle.u[n]
        u_c = T.constant(u_row.reshape(1, -1))
        e_c = T.constant(bundle.e_mean[n].reshape(1, -1))
        g_c = T.constant(bundle.g_mean[n].reshape(1, -1))
        score = self.selector.score(u_c, e_c, g_c)
        if cfg.force_source is not None:
            gate = SourceSelector.hard_gate(cfg.force_source == "retrieved")
        elif gumbel_rng is not None:
            gate = self.selector.sample_gate(
                score, cfg.tau, gumbel_rng.gumbel(2)
            )
        else:
            gate = SourceSelector.hard_gate(float(score.data[0, 0]) >= 0.0)
        i_ret = T.take_cols(gate, 0, 1)
        i_gen = T.take_cols(gate, 1, 2)
        fused_rows = []
        alphas = {}
        for rel in cfg.relations:
            e_mat = bundle.candidate_matrix(n, rel, "retrieved")
            g_mat = bundle.candidate_matrix(n, rel, "generated")
            cand = T.add(
                T.scale(T.constant(e_mat), i_ret),
                T.scale(T.constant(g_mat), i_gen),
            )
            fused, alpha = self.fuser.fuse_relation(cand, z_row, u_row)
            fused_rows.append(fused)
            if collect is not None:
                alphas[rel] = alpha.data[0].copy()
        c = self.fuser.combine_relations(fused_rows)
        if collect is not None:
            p = 1.0 / (1.0 + np.exp(-float(score.data[0, 0])))
            collect.append(
                {
                    "p_retrieved": p,
                    "source": "retrieved"
                    if float(gate.data[0, 0]) >= 0.5
                    else "generated",
                    "alphas": alphas,
                }
            )
        return c

    def _step_features(self, bundle, gumbel_rng, collect=None):
        cfg = self.cfg
        n = bundle.n
        if n > cfg.max_dialogue_length:
            raise ContractError(
                "dialogue length %d exceeds max %d"
                % (n, cfg.max_dialogue_length)
            )
        rows = []
        zeros_z = np.zeros(cfg.d_z)
        for i in range(n):
            z_row = bundle.z[i] if cfg.use_topics else zeros_z
            sub_rng = gumbel_rng.split("u%d" % i) if gumbel_rng else None
            c = self._knowledge_vector(bundle, i, z_row, sub_rng, collect)
            u_hat = self.norm_u(T.constant(bundle.u[i].reshape(1, -1)))
            z_hat = T.constant(z_row.reshape(1, -1))
            if cfg.use_topics:
                z_hat = self.norm_z(z_hat)
            if cfg.use_kb:
                c = self.norm_c(c)
            feat = T.concat([u_hat, z_hat, c], axis=1)
            rows.append(feat)
        return T.concat(rows, axis=0)

    def _encode(self, feats):
        n = feats.shape[0]
        x = T.add(
            self.in_proj(feats), sinusoid_positions(n, self.cfg.d_model)
        )
        blocked = causal_blocked(n)
        for block in self.enc_blocks:
            x = block(x, blocked)
        return x

    def _decode(self, enc_states, dec_label_ids):
        n = dec_label_ids.shape[0]
        s = T.add(
            self.label_embed(dec_label_ids),
            sinusoid_positions(n, self.cfg.d_model),
        )
        self_blocked = causal_blocked(n)
        cross_blocked = causal_blocked(n, enc_states.shape[0])
        for block in self.dec_blocks:
            s = block(s, enc_states, self_blocked, cross_blocked)
        return self.head(s)

    # ------------------------------------------------------------- training

    def loss(self, bundle, gumbel_rng=None, label_dropout=0.0, drop_rng=None):
        """Teacher-forced NLL summed over the dialogue. Returns
        (loss tensor, per-step loss tensor [n]).

        label_dropout hides each previous-label input with that
        probability (replaced by the BOS placeholder). Label history is
        a strong predictor on its own here, and a decoder allowed to
        lean on it fully collapses to label copying at inference; the
        dropout forces the step features to carry weight."""
        labels = bundle.label_ids
        feats = self._step_features(bundle, gumbel_rng)
        enc_states = self._encode(feats)
        dec_in = np.concatenate([[self.bos_label], labels[:-1]]).astype(
            np.int64
        )
        if label_dropout > 0.0:
            if drop_rng is None:
                raise ContractError("label_dropout needs an rng")
            hide = drop_rng.uniform(0.0, 1.0, (dec_in.shape[0],)) < label_dropout
            hide[0] = False  # position 0 is already the placeholder
            dec_in = np.where(hide, self.bos_label, dec_in)
        logits = self._decode(enc_states, dec_in)
        losses = T.cross_entropy_rows(logits, labels, ignore_id=-1)
        return T.tsum(losses), losses

    def predict(self, bundle):
        """Greedy autoregressive labels (ties -> lowest id). Runs
        tape-free with the deterministic knowledge gate."""
        n = bundle.n
        feats = self._step_features(bundle, None)
        enc_states = self._encode(feats)
        preds = []
        for i in range(n):
            dec_in = np.asarray(
                [self.bos_label] + preds, dtype=np.int64
            )
            logits = self._decode(enc_states, dec_in)
            preds.append(int(np.argmax(logits.data[i])))
        return np.asarray(preds, dtype=np.int64)

    def explain(self, bundle):
        """Knowledge audit for one dialogue: per utterance the pointer
        probability, the chosen source, and per-relation attention over
        candidate texts (sorted by weight, summing to 1)."""
        collect = []
        self._step_features(bundle, None, collect=collect)
        report = []
        for i, info in enumerate(collect):
            cands = bundle.items[i]
            rels = {}
            for rel, alpha in info["alphas"].items():
                texts = (
                    cands[rel].retrieved_texts
                    if info["source"] == "retrieved"
                    else cands[rel].generated_texts
                )
                ranked = sorted(
                    zip(texts, alpha.tolist()), key=lambda p: -p[1]
                )
                rels[rel] = ranked
            report.append(
                {
                    "utterance_index": i,
                    "utterance": bundle.utterances[i]
                    if bundle.utterances
                    else "",
                    "p_retrieved": info["p_retrieved"],
                    "source": info["source"],
                    "relations": rels,
                }
            )
        return report


@dataclass
class ClfTrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    patience: int = 3
    label_dropout: float = 0.5  # teacher-forcing inputs hidden at this rate


def train_classifier(
    model, store, train_feats, dev_feats, cfg, rng, exclude_ids=()
):
    """Adam per dialogue with teacher forcing; early stopping on dev
    micro-F1 (patience in epochs); best parameters are restored.

    Returns a history dict (train_nll, dev_micro_f1 per epoch).
    """
    from .evaluation import confusion_matrix, f1_scores

    if not train_feats:
        raise ContractError("empty training set")
    adam = AdamState(lr=cfg.lr)
    order_rng = rng.split("order")
    gum_rng = rng.split("gumbel")
    drop_rng = rng.split("labeldrop")
    history = {"train_nll": [], "dev_micro_f1": []}
    best = (-1.0, None)
    bad = 0
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.split("e%d" % epoch).permutation(len(train_feats))
        ep_loss = 0.0
        for di in order:
            bundle = train_feats[int(di)]
            step += 1
            store.zero_grad()
            with Tape() as tape:
                loss, _ = model.loss(
                    bundle,
                    gum_rng.split("s%d" % step),
                    label_dropout=cfg.label_dropout,
                    drop_rng=drop_rng.split("s%d" % step),
                )
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    "classifier loss non-finite at step %d" % step
                )
            ep_loss += val
            tape.backward(loss)
            adam_step(store.arrays(), store.grads(), adam)
            store.bump()
        history["train_nll"].append(ep_loss)
        golds = []
        preds = []
        for bundle in dev_feats:
            p = model.predict(bundle)
            golds.extend(bundle.label_ids.tolist())
            preds.extend(p.tolist())
        cm = confusion_matrix(golds, preds, model.cfg.n_labels)
        f1 = f1_scores(cm, exclude=exclude_ids)["micro"]
        history["dev_micro_f1"].append(f1)
        if f1 > best[0]:
            best = (f1, {k: v.copy() for k, v in store.arrays().items()})
            bad = 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    if best[1] is not None:
        store.load_arrays(best[1])
    return history


def build_classifier(store, cfg, rng):
    return EmotionClassifier(store, cfg, rng)


def variant_config(base, variant):
    """Named ablations of a ClfConfig."""
    if variant == "full":
        return replace(base)
    if variant == "minus_topics":
        return replace(base, use_topics=False)
    if variant == "minus_kb":
        return replace(base, use_kb=False)
    if variant == "kat_sbert":
        return replace(base, force_source="retrieved")
    if variant == "kat_comet":
        return replace(base, force_source="generated")
    raise ContractError("unknown variant %r" % variant)
