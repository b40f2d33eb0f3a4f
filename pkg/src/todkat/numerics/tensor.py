"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Tensors are 0-d scalars, 1-d vectors, or 2-d matrices. A Tape records
operations while active (define-by-run); ``Tape.backward`` replays the
nodes in strictly decreasing append order and accumulates gradients into
the leaves. Broadcasting is deliberately narrow: same-shape elementwise
ops plus explicit row-vector variants. Batching is done with loops by
the callers, not inside the ops.
"""

import numpy as np

from ..errors import ContractError
from .backend import kernels as K

_DEBUG_FINITE = False


def set_debug_checks(enabled):
    """Toggle NaN/Inf detection on every op output (slow, for tests)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _check_finite(arr, where):
    if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite values in %s" % where)


def _as_array(values, shape=None):
    # note: asarray with order="C" keeps 0-d scalars 0-d, unlike
    # ascontiguousarray which would promote them to 1-d
    arr = np.asarray(values, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim > 2:
        raise ContractError("tensors are at most 2-d, got shape %s" % (arr.shape,))
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A value in the graph. ``grad`` is populated by ``Tape.backward``."""

    __slots__ = ("data", "requires_grad", "grad", "_node_id", "_tape_token")

    def __init__(self, values, requires_grad=False, shape=None):
        self.data = _as_array(values, shape)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node_id = -1
        self._tape_token = None
        _check_finite(self.data, "tensor init")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return "Tensor(shape=%s, grad=%s)" % (
            self.data.shape,
            "set" if self.grad is not None else "none",
        )

    # operator sugar; the named functions below do the real work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


class _Node:
    __slots__ = ("kind", "input_ids", "backward", "leaf")

    def __init__(self, kind, input_ids, backward, leaf=None):
        self.kind = kind
        self.input_ids = input_ids
        self.backward = backward
        self.leaf = leaf


_ACTIVE = None


class Tape:
    """Single-use gradient tape. Use as a context manager around the
    forward pass, then call ``backward(loss)`` exactly once."""

    __slots__ = ("nodes", "_consumed", "_entered")

    def __init__(self):
        self.nodes = []
        self._consumed = False
        self._entered = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        if self._entered:
            raise ContractError("a tape cannot be reused")
        self._entered = True
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def _leaf_id(self, tensor):
        if tensor._tape_token is self:
            return tensor._node_id
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, leaf=tensor))
        tensor._node_id = nid
        tensor._tape_token = self
        return nid

    def _record(self, kind, out_data, inputs, backward):
        input_ids = tuple(
            self._leaf_id(t)
            if (t._tape_token is not self and t.requires_grad)
            else (t._node_id if t._tape_token is self else -1)
            for t in inputs
        )
        out = Tensor(out_data, requires_grad=True)
        nid = len(self.nodes)
        self.nodes.append(_Node(kind, input_ids, backward))
        out._node_id = nid
        out._tape_token = self
        return out

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into each leaf's ``grad``."""
        if self._consumed:
            raise ContractError("backward was already called on this tape")
        if _ACTIVE is self:
            raise ContractError("exit the tape context before backward")
        self._consumed = True
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ContractError("backward needs a scalar loss tensor")
        if loss._tape_token is not self:
            raise ContractError("loss was not computed under this tape")
        grads = {loss._node_id: np.ones_like(loss.data)}
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                t = node.leaf
                t.grad = g if t.grad is None else t.grad + g
                continue
            for iid, gi in zip(node.input_ids, node.backward(g)):
                if iid < 0 or gi is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = gi if acc is None else acc + gi


def _tracked(inputs):
    if _ACTIVE is None:
        return False
    return any(
        t.requires_grad or t._tape_token is _ACTIVE for t in inputs
    )


def _emit(kind, out_data, inputs, backward):
    _check_finite(out_data, kind)
    if _tracked(inputs):
        return _ACTIVE._record(kind, out_data, inputs, backward)
    return Tensor(out_data)


def constant(values, shape=None):
    return Tensor(values, requires_grad=False, shape=shape)


# ---------------------------------------------------------------- arithmetic


def _coerce(x):
    """Array-likes become constant tensors; python scalars stay scalars."""
    if isinstance(x, Tensor) or isinstance(x, (int, float)):
        return x
    return Tensor(x)


def add(a, b):
    """Elementwise a + b. Shapes must match exactly; python scalars and
    ndarrays are accepted as constants."""
    a, b = _coerce(a), _coerce(b)
    if not isinstance(a, Tensor):
        return add_scalar(b, float(a))
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    if a.shape != b.shape:
        raise ContractError("add shape mismatch %s vs %s" % (a.shape, b.shape))
    out = K.ew_add(a.data, b.data)
    return _emit("add", out, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    if not isinstance(b, Tensor):
        return add_scalar(a, -float(b))
    if not isinstance(a, Tensor):
        return add_scalar(neg(b), float(a))
    if a.shape != b.shape:
        raise ContractError("sub shape mismatch %s vs %s" % (a.shape, b.shape))
    out = K.ew_sub(a.data, b.data)
    return _emit("sub", out, (a, b), lambda g: (g, K.scal_mul(g, -1.0)))


def neg(x):
    out = K.scal_mul(x.data, -1.0)
    return _emit("neg", out, (x,), lambda g: (K.scal_mul(g, -1.0),))


def mul(a, b):
    """Elementwise a * b, same shape (scalars become mul_scalar)."""
    a, b = _coerce(a), _coerce(b)
    if not isinstance(a, Tensor):
        return mul_scalar(b, float(a))
    if not isinstance(b, Tensor):
        return mul_scalar(a, float(b))
    if a.shape != b.shape:
        raise ContractError("mul shape mismatch %s vs %s" % (a.shape, b.shape))
    out = K.ew_mul(a.data, b.data)
    ad, bd = a.data, b.data
    return _emit(
        "mul", out, (a, b), lambda g: (K.ew_mul(g, bd), K.ew_mul(g, ad))
    )


def add_scalar(x, c):
    out = K.scal_add(x.data, float(c))
    return _emit("add_scalar", out, (x,), lambda g: (g,))


def mul_scalar(x, c):
    c = float(c)
    out = K.scal_mul(x.data, c)
    return _emit("mul_scalar", out, (x,), lambda g: (K.scal_mul(g, c),))


def add_rowvec(x, v):
    """x[m, n] + v[n] broadcast across rows."""
    x, v = _coerce(x), _coerce(v)
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ContractError(
            "add_rowvec needs x[m,n] and v[n], got %s and %s"
            % (x.shape, v.shape)
        )
    out = K.add_rowvec(x.data, v.data)
    return _emit("add_rowvec", out, (x, v), lambda g: (g, K.sum_cols(g)))


def mul_rowvec(x, v):
    """x[m, n] * v[n] broadcast across rows."""
    x, v = _coerce(x), _coerce(v)
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ContractError(
            "mul_rowvec needs x[m,n] and v[n], got %s and %s"
            % (x.shape, v.shape)
        )
    out = K.mul_rowvec(x.data, v.data)
    xd, vd = x.data, v.data

    def bwd(g):
        return K.mul_rowvec(g, vd), K.sum_cols(K.ew_mul(g, xd))

    return _emit("mul_rowvec", out, (x, v), bwd)


def scale(x, s):
    """x * s where s is a [1, 1] (or scalar-shaped) tensor, broadcast to
    all of x. Gradient flows into both operands."""
    if s.data.size != 1:
        raise ContractError("scale factor must be a single element tensor")
    sval = float(s.data.reshape(-1)[0])
    out = K.scal_mul(x.data, sval)
    xd = x.data
    sshape = s.data.shape

    def bwd(g):
        gs = np.asarray(K.sum_all(K.ew_mul(g, xd))).reshape(sshape)
        return K.scal_mul(g, sval), gs

    return _emit("scale", out, (x, s), bwd)


# ------------------------------------------------------------------- matmul


def matmul(a, b, transpose_a=False, transpose_b=False):
    """op(a) @ op(b) for 2-d tensors, with optional transposes folded in."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(
            "matmul needs 2-d operands, got %s and %s" % (a.shape, b.shape)
        )
    ka = a.shape[0] if transpose_a else a.shape[1]
    kb = b.shape[1] if transpose_b else b.shape[0]
    if ka != kb:
        raise ContractError(
            "matmul inner dims differ: %s (ta=%s) vs %s (tb=%s)"
            % (a.shape, transpose_a, b.shape, transpose_b)
        )
    out = K.gemm(a.data, b.data, transpose_a, transpose_b)
    ad, bd = a.data, b.data
    ta, tb = transpose_a, transpose_b

    def bwd(g):
        if not ta and not tb:
            ga = K.gemm(g, bd, False, True)
            gb = K.gemm(ad, g, True, False)
        elif ta and not tb:
            ga = K.gemm(bd, g, False, True)
            gb = K.gemm(ad, g, False, False)
        elif not ta and tb:
            ga = K.gemm(g, bd, False, False)
            gb = K.gemm(g, ad, True, False)
        else:
            ga = K.gemm(bd, g, True, True)
            gb = K.gemm(g, ad, True, True)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def transpose(x):
    if x.ndim != 2:
        raise ContractError("transpose needs a 2-d tensor")
    out = np.ascontiguousarray(x.data.T)
    return _emit(
        "transpose", out, (x,), lambda g: (np.ascontiguousarray(g.T),)
    )


def reshape(x, shape):
    out = np.ascontiguousarray(x.data.reshape(shape))
    old = x.data.shape
    return _emit(
        "reshape", out, (x,), lambda g: (np.ascontiguousarray(g.reshape(old)),)
    )


# ------------------------------------------------------------ nonlinearities


def tanh(x):
    out = K.tanh_fwd(x.data)
    return _emit("tanh", out, (x,), lambda g: (K.tanh_bwd(out, g),))


def sigmoid(x):
    out = K.sigmoid_fwd(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (K.sigmoid_bwd(out, g),))


def exp(x):
    out = K.exp_fwd(x.data)
    return _emit("exp", out, (x,), lambda g: (K.ew_mul(g, out),))


def log(x):
    if np.any(x.data <= 0):
        raise ContractError("log needs strictly positive inputs")
    out = K.log_fwd(x.data)
    xd = x.data
    return _emit("log", out, (x,), lambda g: (g / xd,))


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    if not lo < hi:
        raise ContractError("clamp needs lo < hi")
    out = K.clamp_fwd(x.data, lo, hi)
    xd = x.data
    return _emit("clamp", out, (x,), lambda g: (K.clamp_bwd(xd, g, lo, hi),))


# -------------------------------------------------------- softmax and losses


def softmax(x):
    """Softmax over the last axis (rows of a matrix, or a whole vector).
    Max-shifted; rows sum to 1 within 1e-12."""
    if x.ndim == 1:
        y = K.softmax_rows(x.data[None, :])[0]

        def bwd1(g):
            return (K.softmax_rows_bwd(y[None, :], g[None, :])[0],)

        return _emit("softmax", y, (x,), bwd1)
    if x.ndim != 2:
        raise ContractError("softmax needs a 1-d or 2-d tensor")
    out = K.softmax_rows(x.data)
    return _emit(
        "softmax", out, (x,), lambda g: (K.softmax_rows_bwd(out, g),)
    )


def layer_norm_rows(x, eps=1e-12):
    """Normalize each row of x to zero mean and unit variance (no affine;
    compose with mul_rowvec/add_rowvec for gamma/beta)."""
    if x.ndim != 2:
        raise ContractError("layer_norm_rows needs a 2-d tensor")
    y, rstd = K.layernorm_rows(x.data, eps)
    return _emit(
        "layer_norm", y, (x,), lambda g: (K.layernorm_rows_bwd(y, rstd, g),)
    )


def cross_entropy_rows(logits, targets, ignore_id=-1):
    """Softmax cross-entropy per row against integer targets.

    Args:
        logits: [m, v] tensor.
        targets: int array-like of length m; entries equal to ignore_id
            produce loss 0 and no gradient for that row.
    Returns a [m] tensor of losses (not reduced).
    """
    if logits.ndim != 2:
        raise ContractError("cross_entropy_rows needs 2-d logits")
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ContractError(
            "targets must be 1-d of length %d" % logits.shape[0]
        )
    live = t[t != ignore_id]
    if live.size and (live.min() < 0 or live.max() >= logits.shape[1]):
        raise ContractError("target id out of range for %d classes" % logits.shape[1])
    losses, probs = K.ce_rows(logits.data, t, ignore_id)
    return _emit(
        "cross_entropy",
        losses,
        (logits,),
        lambda g: (K.ce_rows_bwd(probs, t, g, ignore_id),),
    )


# --------------------------------------------------------- structure changes


def gather_rows(table, ids):
    """Select rows of a [v, d] table by integer ids; backward scatters."""
    if table.ndim != 2:
        raise ContractError("gather_rows needs a 2-d table")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError("ids must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("row id out of range [0, %d)" % table.shape[0])
    out = K.gather_rows(table.data, idx)
    vshape = table.data.shape

    def bwd(g):
        gt = np.zeros(vshape)
        K.scatter_add_rows(gt, idx, g)
        return (gt,)

    return _emit("gather_rows", out, (table,), bwd)


def masked_fill(x, blocked, value):
    """Replace entries of x where ``blocked`` is True with ``value``
    (a constant); gradient is zero at the filled positions."""
    mask = np.asarray(blocked, dtype=bool)
    if mask.shape != x.shape:
        raise ContractError(
            "mask shape %s != tensor shape %s" % (mask.shape, x.shape)
        )
    out = K.masked_fill(x.data, mask, float(value))
    keep = (~mask).astype(np.float64)
    return _emit("masked_fill", out, (x,), lambda g: (K.ew_mul(g, keep),))


def concat(tensors, axis=0):
    """Concatenate along axis 0 (rows) or 1 (cols)."""
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    nd = ts[0].ndim
    if any(t.ndim != nd for t in ts):
        raise ContractError("concat inputs must share rank")
    if nd == 1 and axis != 0:
        raise ContractError("1-d concat only supports axis 0")
    if nd == 2:
        other = 1 - axis
        ref = ts[0].shape[other]
        if any(t.shape[other] != ref for t in ts):
            raise ContractError("concat inputs disagree on the fixed axis")
    out = np.ascontiguousarray(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for i in range(len(sizes)):
            lo, hi = bounds[i], bounds[i + 1]
            if nd == 1 or axis == 0:
                outs.append(np.ascontiguousarray(g[lo:hi]))
            else:
                outs.append(np.ascontiguousarray(g[:, lo:hi]))
        return tuple(outs)

    return _emit("concat", out, ts, bwd)


def take_rows(x, lo, hi):
    """Contiguous row slice x[lo:hi, :] (or element slice of a vector)."""
    n = x.shape[0]
    if not (0 <= lo < hi <= n):
        raise ContractError("row slice [%d:%d) out of range %d" % (lo, hi, n))
    out = np.ascontiguousarray(x.data[lo:hi])
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[lo:hi] = g
        return (gx,)

    return _emit("take_rows", out, (x,), bwd)


def take_cols(x, lo, hi):
    """Contiguous column slice x[:, lo:hi]."""
    if x.ndim != 2:
        raise ContractError("take_cols needs a 2-d tensor")
    n = x.shape[1]
    if not (0 <= lo < hi <= n):
        raise ContractError("col slice [%d:%d) out of range %d" % (lo, hi, n))
    out = np.ascontiguousarray(x.data[:, lo:hi])
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[:, lo:hi] = g
        return (gx,)

    return _emit("take_cols", out, (x,), bwd)


# --------------------------------------------------------------- reductions


def tsum(x, axis=None):
    """Sum to a scalar (axis=None) or along one axis of a matrix."""
    if axis is None:
        out = np.asarray(K.sum_all(x.data))
        shape = x.data.shape
        return _emit(
            "sum", out, (x,), lambda g: (np.full(shape, float(g)),)
        )
    if x.ndim != 2 or axis not in (0, 1):
        raise ContractError("axis sum needs a 2-d tensor and axis 0 or 1")
    out = K.sum_cols(x.data) if axis == 0 else K.sum_rows(x.data)
    shape = x.data.shape

    def bwd(g):
        if axis == 0:
            return (np.ascontiguousarray(np.broadcast_to(g[None, :], shape)),)
        return (np.ascontiguousarray(np.broadcast_to(g[:, None], shape)),)

    return _emit("sum_axis", out, (x,), bwd)


def tmean(x, axis=None):
    if axis is None:
        return mul_scalar(tsum(x), 1.0 / x.data.size)
    k = x.shape[0] if axis == 0 else x.shape[1]
    return mul_scalar(tsum(x, axis), 1.0 / k)
