"""Sequential latent-topic model over dialogues.

Each utterance n gets a latent topic vector z_n. The posterior sees the
utterance's pooled encoding and the recurrent topic state h_{n-1}; the
prior sees only h_{n-1}, so at prediction time topics depend on the
past alone. The topic state advances by attending from the projected
z_n over the utterance's token states. Training maximizes the ELBO:
token reconstruction through the upper LM stack plus a KL term between
posterior and prior, with a linear KL warm-up.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, TrainingDivergedError
from .nn import Linear, MultiHeadAttention, blocked_for_keys
from .numerics import AdamState, Tape, adam_step
from .numerics import tensor as T
from .numerics.tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


@dataclass
class GaussParams:
    mu: object  # Tensor [1, d_z]
    logvar: object  # Tensor [1, d_z], clamped to [-8, 8]


class _TwoLayerHead:
    """Linear -> tanh -> Linear, the shape of all four moment nets."""

    def __init__(self, store, name, d_in, d_hidden, d_out, rng):
        self.lin1 = Linear(store, name + ".lin1", d_in, d_hidden, rng)
        self.lin2 = Linear(store, name + ".lin2", d_hidden, d_out, rng)

    def __call__(self, x):
        return self.lin2(T.tanh(self.lin1(x)))


class TopicVAE:
    """Posterior/prior moment nets plus the attention transition."""

    def __init__(self, store, d_model, d_z, d_hidden, n_heads, rng):
        self.d_model = d_model
        self.d_z = d_z
        self.post_mu = _TwoLayerHead(
            store, "vae.post_mu", 2 * d_model, d_hidden, d_z, rng
        )
        self.post_logvar = _TwoLayerHead(
            store, "vae.post_logvar", 2 * d_model, d_hidden, d_z, rng
        )
        self.prior_mu = _TwoLayerHead(
            store, "vae.prior_mu", d_model, d_hidden, d_z, rng
        )
        self.prior_logvar = _TwoLayerHead(
            store, "vae.prior_logvar", d_model, d_hidden, d_z, rng
        )
        self.z_query = Linear(store, "vae.trans.z_query", d_z, d_model, rng)
        self.trans_attn = MultiHeadAttention(
            store, "vae.trans.attn", d_model, n_heads, rng
        )

    def initial_state(self):
        """h_0 is the zero vector."""
        return Tensor(np.zeros((1, self.d_model)))

    def posterior_params(self, pooled, h_prev):
        inp = T.concat([pooled, h_prev], axis=1)
        mu = self.post_mu(inp)
        logvar = T.clamp(self.post_logvar(inp), LOGVAR_MIN, LOGVAR_MAX)
        return GaussParams(mu, logvar)

    def prior_params(self, h_prev):
        mu = self.prior_mu(h_prev)
        logvar = T.clamp(self.prior_logvar(h_prev), LOGVAR_MIN, LOGVAR_MAX)
        return GaussParams(mu, logvar)

    def transition(self, z, enc):
        """Advance the topic state: attend from the projected z over the
        utterance's token states (PAD keys hidden)."""
        if not enc.valid.any():
            raise ContractError("transition needs at least one valid key")
        q = self.z_query(z)
        blocked = blocked_for_keys(1, enc.valid)
        return self.trans_attn(q, enc.token_states, enc.token_states, blocked)


def reparam_sample(params, eps):
    """z = mu + exp(logvar / 2) * eps with eps supplied by the caller."""
    std = T.exp(T.mul_scalar(params.logvar, 0.5))
    return T.add(params.mu, T.mul(std, T.constant(eps)))


def kl_gaussian(q, p):
    """KL(q || p) for diagonal Gaussians, summed over dimensions.

    0.5 * sum( exp(lq - lp) + (mq - mp)^2 exp(-lp) - 1 + lp - lq ).
    Exactly zero when q and p coincide.
    """
    if q.mu.shape != p.mu.shape:
        raise ContractError(
            "KL shapes differ: %s vs %s" % (q.mu.shape, p.mu.shape)
        )
    dl = T.sub(q.logvar, p.logvar)
    var_ratio = T.exp(dl)
    dm = T.sub(q.mu, p.mu)
    maha = T.mul(T.mul(dm, dm), T.exp(T.neg(p.logvar)))
    inner = T.sub(T.sub(T.add(var_ratio, maha), 1.0), dl)
    return T.mul_scalar(T.tsum(inner), 0.5)


def elbo_step(lm, vae, enc, h_prev, eps, beta, drop=None):
    """One utterance's contribution to the negative ELBO.

    Returns (loss, nll, kl, z, h_next, n_tokens); loss = nll + beta*kl,
    all token NLLs summed (not averaged) so dialogue losses add up.
    drop is None or (dec_in_drop, memory_drop) masks handed to
    decode_upper.
    """
    q = vae.posterior_params(enc.pooled, h_prev)
    p = vae.prior_params(h_prev)
    z = reparam_sample(q, eps)
    if drop is None:
        _, nll, n_tokens = lm.decode_upper(z, enc)
    else:
        _, nll, n_tokens = lm.decode_upper(
            z, enc, dec_in_drop=drop[0], memory_drop=drop[1]
        )
    kl = kl_gaussian(q, p)
    loss = T.add(nll, T.mul_scalar(kl, beta))
    h_next = vae.transition(z, enc)
    return loss, nll, kl, z, h_next, n_tokens


def topics_from_encodings(vae, encs):
    """Deterministic topic vectors (posterior means) for a dialogue's
    pre-computed utterance encodings. Returns a [n, d_z] ndarray."""
    if not encs:
        raise ContractError("dialogue has no utterances")
    h = vae.initial_state()
    zs = []
    for enc in encs:
        q = vae.posterior_params(enc.pooled, h)
        z = q.mu
        h = vae.transition(z, enc)
        zs.append(z.data[0].copy())
    return np.asarray(zs)


def extract_topics(lm, vae, id_rows):
    """Deterministic per-utterance topic vectors for one dialogue.

    Uses the posterior mean everywhere (no sampling). Returns
    (Z [n, d_z] ndarray, encodings list).
    """
    if not id_rows:
        raise ContractError("dialogue has no utterances")
    encs = [lm.encode_lower(ids) for ids in id_rows]
    return topics_from_encodings(vae, encs), encs


@dataclass
class TopicTrainConfig:
    epochs: int = 3
    lr: float = 5e-5
    beta_max: float = 1.0
    kl_warmup_epochs: float = 1.0
    # training-time corruption of the reconstruction copy paths; without
    # it the decoder reads the tokens straight back off the lower stack
    # and the latent carries nothing once training converges
    word_dropout: float = 0.0
    memory_dropout: float = 0.0
    select_every: int = 100  # steps between selector calls


def dialogue_nelbo(lm, vae, id_rows, beta=1.0):
    """Negative ELBO proxy for monitoring: deterministic, z = posterior
    mean. Returns (total, n_tokens)."""
    h = vae.initial_state()
    total = 0.0
    n_total = 0
    for ids in id_rows:
        enc = lm.encode_lower(ids)
        q = vae.posterior_params(enc.pooled, h)
        p = vae.prior_params(h)
        z = q.mu
        _, nll, n_tok = lm.decode_upper(z, enc)
        total += nll.item() + beta * kl_gaussian(q, p).item()
        n_total += n_tok
        h = vae.transition(z, enc)
    return total, n_total


def train_topic_model(
    lm, vae, store, train_seqs, dev_seqs, cfg, rng, selector=None
):
    """Fit the LM + VAE jointly on tokenized dialogues.

    ``train_seqs``/``dev_seqs`` are lists of dialogues, each a list of
    utterance id rows. One Adam step per dialogue. The KL weight ramps
    linearly from 0 to beta_max across the first kl_warmup_epochs.
    Raises TrainingDivergedError on a non-finite loss. Returns a history
    dict with per-epoch aggregates.

    ``selector`` is an optional zero-argument callable scoring the
    current model (higher is better), typically on held-out dialogues.
    When given, the model is scored every cfg.select_every steps and the
    best-scoring parameters are restored before returning; how useful
    the latent is to downstream consumers peaks well before the
    reconstruction loss bottoms out, so the last checkpoint is rarely
    the one to keep.
    """
    if not train_seqs:
        raise ContractError("empty training set")
    if selector is not None and cfg.select_every < 1:
        raise ContractError("select_every must be >= 1 with a selector")
    adam = AdamState(lr=cfg.lr)
    order_rng = rng.split("order")
    eps_rng = rng.split("eps")
    drop_rng = rng.split("drop")
    corrupt = cfg.word_dropout > 0.0 or cfg.memory_dropout > 0.0
    warm_steps = max(1, int(cfg.kl_warmup_epochs * len(train_seqs)))
    history = {
        "train_nelbo": [],
        "train_tokens": [],
        "dev_nelbo": [],
        "select_scores": [],
    }
    best_score = None
    best_params = None
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.split("epoch%d" % epoch).permutation(len(train_seqs))
        ep_loss = 0.0
        ep_tokens = 0
        for di in order:
            id_rows = train_seqs[di]
            beta = cfg.beta_max * min(1.0, step / warm_steps)
            step += 1
            eps_d = eps_rng.split("d%d" % step)
            drop_d = drop_rng.split("d%d" % step)
            store.zero_grad()
            with Tape() as tape:
                h = vae.initial_state()
                total = None
                for ui, ids in enumerate(id_rows):
                    eps = eps_d.split("u%d" % ui).normal((1, vae.d_z))
                    enc = lm.encode_lower(ids)
                    drop = None
                    if corrupt:
                        dr = drop_d.split("u%d" % ui)
                        t = len(ids)
                        drop = (
                            dr.uniform(0.0, 1.0, (t - 1,)) < cfg.word_dropout,
                            dr.uniform(0.0, 1.0, (t,)) < cfg.memory_dropout,
                        )
                    loss, _, _, _, h, n_tok = elbo_step(
                        lm, vae, enc, h, eps, beta, drop=drop
                    )
                    total = loss if total is None else T.add(total, loss)
                    ep_tokens += n_tok
            val = total.item()
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    "topic model loss became non-finite at step %d" % step
                )
            ep_loss += val
            tape.backward(total)
            adam_step(store.arrays(), store.grads(), adam)
            store.bump()
            if selector is not None and step % cfg.select_every == 0:
                score = float(selector())
                history["select_scores"].append((step, score))
                if best_score is None or score > best_score:
                    best_score = score
                    best_params = {
                        k: v.copy() for k, v in store.arrays().items()
                    }
        history["train_nelbo"].append(ep_loss)
        history["train_tokens"].append(ep_tokens)
        dev_total = 0.0
        for id_rows in dev_seqs:
            t, _ = dialogue_nelbo(lm, vae, id_rows, beta=cfg.beta_max)
            dev_total += t
        history["dev_nelbo"].append(dev_total)
    if best_params is not None:
        arrays = store.arrays()
        for k, v in best_params.items():
            arrays[k][...] = v
        store.bump()
        history["best_select"] = best_score
    return history
