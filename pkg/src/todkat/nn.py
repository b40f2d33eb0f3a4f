"""Layer library on top of the autodiff core.

Parameters live in a ParamStore under hierarchical dotted names so that
checkpointing, Adam, and cache invalidation all key off the same names.
Modules are plain classes that register their parameters at construction
time; initialization draws from per-parameter-name RNG splits, making it
independent of construction order.

Attention masks are boolean "blocked" matrices (True = may not attend).
Blocked scores are filled with -1e9 before the softmax, which underflows
to an attention weight of exactly 0.0 in float64.
"""

from functools import lru_cache

import numpy as np

from .errors import ContractError
from .numerics import tensor as T
from .numerics.tensor import Tensor

NEG_BIG = -1e9


class ParamStore:
    """Named parameter registry shared by a model's modules.

    ``version`` increments whenever parameter values change wholesale
    (optimizer steps, checkpoint loads); feature caches key off it.
    """

    def __init__(self):
        self._params = {}
        self.version = 0

    def new(self, name, shape, rng=None, init="zeros", bound=None):
        if name in self._params:
            raise ContractError("duplicate parameter name %r" % name)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "uniform":
            if bound is None or rng is None:
                raise ContractError("uniform init needs rng and bound")
            data = rng.split(name).uniform(-bound, bound, shape)
        else:
            raise ContractError("unknown init %r" % init)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def arrays(self):
        return {n: t.data for n, t in self._params.items()}

    def grads(self):
        return {n: t.grad for n, t in self._params.items()}

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def load_arrays(self, arrays, strict=True):
        for name, t in self._params.items():
            if name not in arrays:
                if strict:
                    raise ContractError("missing parameter %r" % name)
                continue
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractError(
                    "parameter %r shape %s != stored %s"
                    % (name, t.data.shape, arr.shape)
                )
            t.data = np.ascontiguousarray(arr)
        self.version += 1

    def bump(self):
        self.version += 1


class Linear:
    """y = x W + b with W[in, out]; scaled-uniform fan-in init."""

    def __init__(self, store, name, d_in, d_out, rng, bias=True):
        bound = 1.0 / np.sqrt(d_in)
        self.w = store.new(name + ".w", (d_in, d_out), rng, "uniform", bound)
        self.b = store.new(name + ".b", (d_out,)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add_rowvec(out, self.b)
        return out


class Embedding:
    """Row lookup into a [vocab, d] table."""

    def __init__(self, store, name, n_rows, d, rng):
        bound = 1.0 / np.sqrt(d)
        self.table = store.new(name + ".table", (n_rows, d), rng, "uniform", bound)

    def __call__(self, ids):
        return T.gather_rows(self.table, ids)


class LayerNorm:
    def __init__(self, store, name, d):
        self.gamma = store.new(name + ".gamma", (d,), init="ones")
        self.beta = store.new(name + ".beta", (d,))

    def __call__(self, x):
        return T.add_rowvec(
            T.mul_rowvec(T.layer_norm_rows(x), self.gamma), self.beta
        )


@lru_cache(maxsize=32)
def sinusoid_positions(n_positions, d):
    """Fixed sine/cosine position table [n_positions, d]."""
    pos = np.arange(n_positions)[:, None].astype(np.float64)
    dim = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return np.ascontiguousarray(table)


def blocked_for_keys(n_queries, key_valid):
    """Blocked matrix that hides invalid keys from every query."""
    kv = np.asarray(key_valid, dtype=bool)
    return np.broadcast_to(~kv[None, :], (n_queries, kv.shape[0])).copy()


def causal_blocked(n_q, n_k=None):
    """Row i may attend columns <= i."""
    n_k = n_q if n_k is None else n_k
    return np.triu(np.ones((n_q, n_k), dtype=bool), k=1)


class MultiHeadAttention:
    """Standard scaled dot-product attention with h heads.

    ``blocked`` is an optional [m, n] bool matrix; True entries get an
    attention weight of exactly zero. A fully blocked query row is a
    contract violation (its softmax would be undefined).
    """

    def __init__(self, store, name, d_model, n_heads, rng):
        if d_model % n_heads != 0:
            raise ContractError(
                "d_model %d not divisible by %d heads" % (d_model, n_heads)
            )
        self.d = d_model
        self.h = n_heads
        self.dh = d_model // n_heads
        self.wq = Linear(store, name + ".wq", d_model, d_model, rng)
        self.wk = Linear(store, name + ".wk", d_model, d_model, rng)
        self.wv = Linear(store, name + ".wv", d_model, d_model, rng)
        self.wo = Linear(store, name + ".wo", d_model, d_model, rng)

    def __call__(self, q_in, k_in, v_in, blocked=None, return_weights=False):
        m = q_in.shape[0]
        n = k_in.shape[0]
        if blocked is not None:
            blocked = np.asarray(blocked, dtype=bool)
            if blocked.shape != (m, n):
                raise ContractError(
                    "blocked mask %s does not match (%d, %d)"
                    % (blocked.shape, m, n)
                )
            if blocked.all(axis=1).any():
                raise ContractError("a query row has no visible keys")
        q = self.wq(q_in)
        k = self.wk(k_in)
        v = self.wv(v_in)
        scale = 1.0 / np.sqrt(self.dh)
        outs = []
        weights = []
        for i in range(self.h):
            lo, hi = i * self.dh, (i + 1) * self.dh
            qh = T.take_cols(q, lo, hi)
            kh = T.take_cols(k, lo, hi)
            vh = T.take_cols(v, lo, hi)
            scores = T.mul_scalar(T.matmul(qh, kh, False, True), scale)
            if blocked is not None:
                scores = T.masked_fill(scores, blocked, NEG_BIG)
            att = T.softmax(scores)
            if return_weights:
                weights.append(att.data.copy())
            outs.append(T.matmul(att, vh))
        out = self.wo(T.concat(outs, axis=1))
        if return_weights:
            return out, weights
        return out


class FeedForward:
    """Two-layer position-wise net with tanh in the middle."""

    def __init__(self, store, name, d_model, d_hidden, rng):
        self.lin1 = Linear(store, name + ".lin1", d_model, d_hidden, rng)
        self.lin2 = Linear(store, name + ".lin2", d_hidden, d_model, rng)

    def __call__(self, x):
        return self.lin2(T.tanh(self.lin1(x)))


class EncoderBlock:
    """Post-norm: LN(x + attn), then LN(h + ff)."""

    def __init__(self, store, name, d_model, n_heads, d_ff, rng):
        self.attn = MultiHeadAttention(store, name + ".attn", d_model, n_heads, rng)
        self.ln1 = LayerNorm(store, name + ".ln1", d_model)
        self.ff = FeedForward(store, name + ".ff", d_model, d_ff, rng)
        self.ln2 = LayerNorm(store, name + ".ln2", d_model)

    def __call__(self, x, blocked=None):
        h = self.ln1(T.add(x, self.attn(x, x, x, blocked)))
        return self.ln2(T.add(h, self.ff(h)))


def _with_prefix(kv, prefix, blocked, m):
    """Prepend always-visible prefix rows to a key/value sequence and
    widen the blocked matrix to match."""
    if prefix is None:
        return kv, blocked
    full = T.concat([prefix, kv], axis=0)
    if blocked is None:
        return full, None
    pad = np.zeros((m, prefix.shape[0]), dtype=bool)
    return full, np.concatenate([pad, blocked], axis=1)


class DecoderBlock:
    """Self-attention, cross-attention to encoder states, feed-forward.

    ``self_prefix`` / ``cross_prefix`` are optional extra rows prepended
    to the key/value sequences of the respective attention (visible to
    every query); the blocked matrices refer to the un-prefixed keys.
    """

    def __init__(self, store, name, d_model, n_heads, d_ff, rng):
        self.self_attn = MultiHeadAttention(
            store, name + ".self_attn", d_model, n_heads, rng
        )
        self.ln1 = LayerNorm(store, name + ".ln1", d_model)
        self.cross_attn = MultiHeadAttention(
            store, name + ".cross_attn", d_model, n_heads, rng
        )
        self.ln2 = LayerNorm(store, name + ".ln2", d_model)
        self.ff = FeedForward(store, name + ".ff", d_model, d_ff, rng)
        self.ln3 = LayerNorm(store, name + ".ln3", d_model)

    def __call__(
        self,
        x,
        enc_states,
        self_blocked=None,
        cross_blocked=None,
        self_prefix=None,
        cross_prefix=None,
    ):
        m = x.shape[0]
        kv, sb = _with_prefix(x, self_prefix, self_blocked, m)
        h = self.ln1(T.add(x, self.self_attn(x, kv, kv, sb)))
        ckv, cb = _with_prefix(enc_states, cross_prefix, cross_blocked, m)
        h2 = self.ln2(T.add(h, self.cross_attn(h, ckv, ckv, cb)))
        return self.ln3(T.add(h2, self.ff(h2)))
