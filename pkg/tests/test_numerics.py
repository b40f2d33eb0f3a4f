"""Autodiff core: per-primitive gradient checks, tape semantics,
optimizer behaviour, RNG streams, checkpoint round-trips."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import todkat.numerics as N
from todkat.errors import ContractError, DataFormatError
from todkat.numerics import Tape, Tensor

from helpers import gradcheck

rng = np.random.default_rng(20240817)


def r(*shape):
    return rng.standard_normal(shape)


class TestPrimitiveGradients:
    def test_add(self):
        gradcheck(lambda a, b: N.tsum(N.add(a, b)), [r(3, 4), r(3, 4)])

    def test_sub(self):
        gradcheck(lambda a, b: N.tsum(N.sub(a, b)), [r(3, 4), r(3, 4)])

    def test_neg(self):
        gradcheck(lambda a: N.tsum(N.neg(a)), [r(5)])

    def test_mul(self):
        gradcheck(lambda a, b: N.tsum(N.mul(a, b)), [r(3, 4), r(3, 4)])

    def test_add_scalar(self):
        gradcheck(lambda a: N.tsum(N.add_scalar(a, 2.5)), [r(3, 4)])

    def test_mul_scalar(self):
        gradcheck(lambda a: N.tsum(N.mul_scalar(a, -1.7)), [r(3, 4)])

    def test_add_rowvec(self):
        gradcheck(lambda x, v: N.tsum(N.add_rowvec(x, v)), [r(3, 4), r(4)])

    def test_mul_rowvec(self):
        gradcheck(lambda x, v: N.tsum(N.mul_rowvec(x, v)), [r(3, 4), r(4)])

    def test_scale(self):
        gradcheck(
            lambda x, s: N.tsum(N.scale(x, s)), [r(3, 4), r(1, 1)]
        )

    @pytest.mark.parametrize("ta", [False, True])
    @pytest.mark.parametrize("tb", [False, True])
    def test_matmul(self, ta, tb):
        m, k, n = 3, 4, 2
        a = r(k, m) if ta else r(m, k)
        b = r(n, k) if tb else r(k, n)
        gradcheck(
            lambda x, y: N.tsum(N.tanh(N.matmul(x, y, ta, tb))), [a, b]
        )

    def test_transpose(self):
        gradcheck(lambda a: N.tsum(N.mul(N.transpose(a), N.transpose(a))), [r(3, 4)])

    def test_reshape(self):
        gradcheck(lambda a: N.tsum(N.tanh(N.reshape(a, (2, 6)))), [r(3, 4)])

    def test_tanh(self):
        gradcheck(lambda a: N.tsum(N.tanh(a)), [r(3, 4)])

    def test_sigmoid(self):
        gradcheck(lambda a: N.tsum(N.sigmoid(a)), [r(3, 4)])

    def test_exp(self):
        gradcheck(lambda a: N.tsum(N.exp(a)), [r(3, 4) * 0.5])

    def test_log(self):
        gradcheck(lambda a: N.tsum(N.log(a)), [np.abs(r(3, 4)) + 0.5])

    def test_clamp(self):
        # keep samples away from the clamp knees so FD stays smooth
        x = r(4, 4)
        x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.5
        gradcheck(lambda a: N.tsum(N.clamp(a, -1.0, 1.0)), [x])

    def test_softmax_2d(self):
        w = r(4)
        gradcheck(
            lambda a: N.tsum(N.mul_rowvec(N.softmax(a), w)), [r(3, 4)]
        )

    def test_softmax_1d(self):
        w = r(5)
        gradcheck(
            lambda a: N.tsum(N.mul(N.softmax(a), Tensor(w))), [r(5)]
        )

    def test_layer_norm(self):
        w = r(6)
        gradcheck(
            lambda a: N.tsum(N.mul_rowvec(N.layer_norm_rows(a), w)),
            [r(4, 6)],
        )

    def test_cross_entropy(self):
        targets = np.array([0, 2, 1, -1])
        gradcheck(
            lambda a: N.tsum(N.cross_entropy_rows(a, targets, ignore_id=-1)),
            [r(4, 3)],
        )

    def test_gather_rows(self):
        ids = np.array([0, 2, 2, 1])
        gradcheck(
            lambda t: N.tsum(N.tanh(N.gather_rows(t, ids))), [r(3, 4)]
        )

    def test_masked_fill(self):
        mask = rng.random((3, 4)) < 0.4
        gradcheck(
            lambda a: N.tsum(N.tanh(N.masked_fill(a, mask, -5.0))),
            [r(3, 4)],
        )

    def test_concat_rows(self):
        gradcheck(
            lambda a, b: N.tsum(N.tanh(N.concat([a, b], axis=0))),
            [r(2, 3), r(4, 3)],
        )

    def test_concat_cols(self):
        gradcheck(
            lambda a, b: N.tsum(N.tanh(N.concat([a, b], axis=1))),
            [r(3, 2), r(3, 4)],
        )

    def test_take_rows(self):
        gradcheck(lambda a: N.tsum(N.tanh(N.take_rows(a, 1, 3))), [r(4, 3)])

    def test_take_cols(self):
        gradcheck(lambda a: N.tsum(N.tanh(N.take_cols(a, 0, 2))), [r(3, 4)])

    def test_sum_axis0(self):
        w = r(4)
        gradcheck(
            lambda a: N.tsum(N.mul(N.tsum(a, axis=0), Tensor(w))), [r(3, 4)]
        )

    def test_sum_axis1(self):
        w = r(3)
        gradcheck(
            lambda a: N.tsum(N.mul(N.tsum(a, axis=1), Tensor(w))), [r(3, 4)]
        )

    def test_mean(self):
        gradcheck(lambda a: N.tmean(N.tanh(a)), [r(3, 4)])


class TestComposedGradients:
    """Multi-op graphs; tolerance 1e-4 relative."""

    def test_mlp_with_cross_entropy(self):
        x = r(5, 4)
        targets = np.array([0, 1, 2, 1, 0])

        def fn(w1, b1, w2, b2):
            h = N.tanh(N.add_rowvec(N.matmul(Tensor(x), w1), b1))
            logits = N.add_rowvec(N.matmul(h, w2), b2)
            ce = N.cross_entropy_rows(logits, targets, ignore_id=-1)
            return N.tmean(ce)

        gradcheck(fn, [r(4, 6), r(6), r(6, 3), r(3)], tol=1e-4)

    def test_attention_block(self):
        mask = np.triu(np.ones((4, 4), dtype=bool), k=1)

        def fn(q, k, v):
            scores = N.mul_scalar(N.matmul(q, k, False, True), 1.0 / np.sqrt(3))
            att = N.softmax(N.masked_fill(scores, mask, -1e9))
            out = N.layer_norm_rows(N.matmul(att, v))
            return N.tsum(N.tanh(out))

        gradcheck(fn, [r(4, 3), r(4, 3), r(4, 3)], tol=1e-4)

    def test_reparametrized_gaussian_kl(self):
        eps = r(2, 3)

        def fn(mu, logvar):
            std = N.exp(N.mul_scalar(logvar, 0.5))
            z = N.add(mu, N.mul(std, Tensor(eps)))
            recon = N.tsum(N.mul(z, z))
            var = N.exp(logvar)
            kl = N.mul_scalar(
                N.tsum(
                    N.sub(
                        N.add(var, N.mul(mu, mu)),
                        N.add_scalar(logvar, 1.0),
                    )
                ),
                0.5,
            )
            return N.add(recon, kl)

        gradcheck(fn, [r(2, 3), r(2, 3) * 0.3], tol=1e-4)


class TestForwardInvariants:
    def test_softmax_rows_sum_to_one(self):
        x = Tensor(r(20, 9) * 4)
        s = N.softmax(x).data
        assert_allclose(s.sum(axis=1), np.ones(20), atol=1e-12)
        assert np.all(s >= 0)

    def test_softmax_shift_invariance(self):
        x = r(5, 7)
        a = N.softmax(Tensor(x)).data
        b = N.softmax(Tensor(x + 1000.0)).data
        assert_allclose(a, b, atol=1e-12)

    def test_masked_softmax_blocked_weight_is_exactly_zero(self):
        x = Tensor(r(6, 6))
        mask = np.triu(np.ones((6, 6), dtype=bool), k=1)
        att = N.softmax(N.masked_fill(x, mask, -1e9)).data
        assert np.all(att[mask] == 0.0)

    def test_layer_norm_row_stats(self):
        y = N.layer_norm_rows(Tensor(r(10, 16) * 3 + 2)).data
        assert np.abs(y.mean(axis=1)).max() < 1e-10
        assert np.abs(y.var(axis=1) - 1.0).max() < 1e-8

    def test_cross_entropy_matches_log_softmax(self):
        x = r(4, 5)
        t = np.array([1, 0, 4, 2])
        losses = N.cross_entropy_rows(Tensor(x), t, ignore_id=-1).data
        p = np.exp(x - x.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        expect = -np.log(p[np.arange(4), t])
        assert_allclose(losses, expect, rtol=1e-12)

    def test_cross_entropy_ignored_rows_zero(self):
        x = r(3, 4)
        losses = N.cross_entropy_rows(Tensor(x), [0, -1, 2], ignore_id=-1)
        assert losses.data[1] == 0.0

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ContractError):
            N.log(Tensor([[1.0, -2.0]]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ContractError):
            N.add(Tensor(r(2, 3)), Tensor(r(3, 2)))
        with pytest.raises(ContractError):
            N.matmul(Tensor(r(2, 3)), Tensor(r(2, 3)))

    def test_rank_limit(self):
        with pytest.raises(ContractError):
            Tensor(np.zeros((2, 2, 2)))

    def test_debug_mode_catches_nonfinite(self):
        N.set_debug_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                N.exp(Tensor(np.full((2, 2), 1e9)))
        finally:
            N.set_debug_checks(False)


class TestTapeSemantics:
    def test_double_backward_raises(self):
        x = Tensor(r(2, 2), requires_grad=True)
        with Tape() as tape:
            loss = N.tsum(N.mul(x, x))
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_tape_reuse_raises(self):
        tape = Tape()
        with tape:
            pass
        with pytest.raises(ContractError):
            with tape:
                pass

    def test_nested_tapes_raise(self):
        with Tape():
            with pytest.raises(ContractError):
                with Tape():
                    pass

    def test_backward_inside_context_raises(self):
        x = Tensor(r(2, 2), requires_grad=True)
        with Tape() as tape:
            loss = N.tsum(x)
            with pytest.raises(ContractError):
                tape.backward(loss)

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([[2.0, 3.0]]), requires_grad=True)
        with Tape() as tape:
            y = N.add(N.mul(x, x), x)  # x^2 + x
            loss = N.tsum(y)
        tape.backward(loss)
        assert_allclose(x.grad, np.array([[5.0, 7.0]]))

    def test_grad_accumulates_across_tapes(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = N.tsum(x)
            tape.backward(loss)
        assert_allclose(x.grad, 2 * np.ones((2, 2)))

    def test_no_tape_records_nothing(self):
        x = Tensor(r(2, 2), requires_grad=True)
        y = N.tanh(x)
        assert y._tape_token is None and not y.requires_grad

    def test_scalar_loss_required(self):
        x = Tensor(r(2, 2), requires_grad=True)
        with Tape() as tape:
            y = N.tanh(x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_constants_get_no_grad(self):
        x = Tensor(r(2, 2), requires_grad=True)
        c = Tensor(r(2, 2))
        with Tape() as tape:
            loss = N.tsum(N.mul(x, c))
        tape.backward(loss)
        assert c.grad is None and x.grad is not None


class TestAdam:
    def test_first_step_magnitude(self):
        # with a single constant gradient g, the bias-corrected first
        # step is lr * g / (|g| + eps), i.e. almost exactly lr * sign(g)
        p = {"w": np.array([1.0, -1.0])}
        g = {"w": np.array([0.5, -0.25])}
        st = N.AdamState(lr=0.1)
        N.adam_step(p, g, st)
        assert_allclose(p["w"], [1.0 - 0.1, -1.0 + 0.1], atol=1e-6)

    def test_zero_gradient_is_fixed_point(self):
        w0 = r(3, 3)
        p = {"w": w0.copy()}
        st = N.AdamState(lr=0.5)
        for _ in range(3):
            N.adam_step(p, {"w": np.zeros((3, 3))}, st)
        assert_array_equal(p["w"], w0)

    def test_missing_grad_means_zero(self):
        w0 = r(2)
        p = {"w": w0.copy()}
        st = N.AdamState(lr=0.5)
        N.adam_step(p, {}, st)
        assert_array_equal(p["w"], w0)

    def test_shape_mismatch_raises(self):
        p = {"w": np.zeros(3)}
        st = N.AdamState(lr=0.1)
        with pytest.raises(ContractError):
            N.adam_step(p, {"w": np.zeros(4)}, st)

    def test_against_reference_sequence(self):
        # independent dense reference implementation
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        w = r(4, 2)
        p = {"w": w.copy()}
        st = N.AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        ref = w.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        for t in range(1, 6):
            g = rng.standard_normal(ref.shape)
            N.adam_step(p, {"w": g}, st)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert_allclose(p["w"], ref, atol=1e-12)


class TestRngStreams:
    def test_same_seed_same_draws(self):
        a = N.RngStream(7).normal((4, 4))
        b = N.RngStream(7).normal((4, 4))
        assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = N.RngStream(7).normal(16)
        b = N.RngStream(8).normal(16)
        assert not np.allclose(a, b)

    def test_split_is_label_deterministic(self):
        root = N.RngStream(3)
        a = root.split("lm").normal(8)
        b = N.RngStream(3).split("lm").normal(8)
        assert_array_equal(a, b)

    def test_sibling_order_irrelevant(self):
        r1 = N.RngStream(3)
        x1 = r1.split("a").normal(4)
        y1 = r1.split("b").normal(4)
        r2 = N.RngStream(3)
        y2 = r2.split("b").normal(4)
        x2 = r2.split("a").normal(4)
        assert_array_equal(x1, x2)
        assert_array_equal(y1, y2)

    def test_children_are_independent(self):
        root = N.RngStream(3)
        assert not np.allclose(
            root.split("a").normal(16), root.split("b").normal(16)
        )

    def test_empty_label_rejected(self):
        with pytest.raises(ContractError):
            N.RngStream(1).split("")


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = {
            "enc.w": r(7, 3),
            "enc.b": r(3),
            "head.w": np.array([[np.pi]]),
        }
        path = tmp_path / "model.ckpt"
        N.save_params(path, params)
        back = N.load_params(path)
        assert list(back) == list(params)
        for k in params:
            assert_array_equal(back[k], params[k])
            assert back[k].dtype == np.float64

    def test_save_load_empty(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        N.save_params(path, {})
        assert N.load_params(path) == {}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataFormatError):
            N.load_params(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        N.save_params(path, {"w": r(4, 4)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(DataFormatError):
            N.load_params(path)

    def test_version_check(self, tmp_path):
        path = tmp_path / "model.ckpt"
        N.save_params(path, {"w": r(2)})
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError):
            N.load_params(path)


class TestBackendParity:
    """The compiled kernels and the numpy kernels agree."""

    def setup_method(self):
        try:
            self.ck = N.get_kernels("cython")
        except (RuntimeError, ValueError, ImportError):
            pytest.skip("compiled backend not built")
        self.pk = N.get_kernels("python")

    def test_all_kernels_agree(self):
        ck, pk = self.ck, self.pk
        x = r(6, 5)
        y = r(6, 5)
        v = r(5)
        pairs = [
            ("ew_add", (x, y)),
            ("ew_sub", (x, y)),
            ("ew_mul", (x, y)),
            ("add_rowvec", (x, v)),
            ("mul_rowvec", (x, v)),
            ("scal_add", (x, 1.3)),
            ("scal_mul", (x, -0.7)),
            ("tanh_fwd", (x,)),
            ("sigmoid_fwd", (x,)),
            ("exp_fwd", (x,)),
            ("log_fwd", (np.abs(x) + 0.1,)),
            ("clamp_fwd", (x, -0.5, 0.5)),
            ("clamp_bwd", (x, y, -0.5, 0.5)),
            ("softmax_rows", (x,)),
            ("softmax_rows_bwd", (pk.softmax_rows(x), y)),
            ("tanh_bwd", (pk.tanh_fwd(x), y)),
            ("sigmoid_bwd", (pk.sigmoid_fwd(x), y)),
            ("sum_rows", (x,)),
            ("sum_cols", (x,)),
            ("masked_fill", (x, x > 0.3, -9.0)),
        ]
        for name, args in pairs:
            a = getattr(ck, name)(*args)
            b = getattr(pk, name)(*args)
            assert_allclose(a, b, rtol=1e-12, atol=1e-12, err_msg=name)
        assert abs(ck.sum_all(x) - pk.sum_all(x)) < 1e-10

    def test_gemm_parity(self):
        for ta in (False, True):
            for tb in (False, True):
                m, k, n = 5, 7, 4
                a = r(k, m) if ta else r(m, k)
                b = r(n, k) if tb else r(k, n)
                assert_allclose(
                    self.ck.gemm(a, b, ta, tb),
                    self.pk.gemm(a, b, ta, tb),
                    rtol=1e-12,
                )

    def test_layernorm_parity(self):
        x = r(6, 9)
        y1, r1 = self.ck.layernorm_rows(x, 1e-12)
        y2, r2 = self.pk.layernorm_rows(x, 1e-12)
        assert_allclose(y1, y2, atol=1e-11)
        assert_allclose(r1, r2, rtol=1e-11)
        gy = r(6, 9)
        assert_allclose(
            self.ck.layernorm_rows_bwd(y1, r1, gy),
            self.pk.layernorm_rows_bwd(y2, r2, gy),
            atol=1e-10,
        )

    def test_ce_parity(self):
        logits = r(5, 4)
        t = np.array([0, 3, -1, 2, 1])
        l1, p1 = self.ck.ce_rows(logits, t, -1)
        l2, p2 = self.pk.ce_rows(logits, t, -1)
        assert_allclose(l1, l2, atol=1e-12)
        assert_allclose(p1, p2, atol=1e-12)
        g = np.abs(r(5)) + 0.1
        assert_allclose(
            self.ck.ce_rows_bwd(p1, t, g, -1),
            self.pk.ce_rows_bwd(p2, t, g, -1),
            atol=1e-12,
        )

    def test_gather_scatter_parity(self):
        table = r(7, 3)
        ids = np.array([0, 6, 2, 2, 5])
        assert_allclose(
            self.ck.gather_rows(table, ids), self.pk.gather_rows(table, ids)
        )
        g = r(5, 3)
        t1 = np.zeros((7, 3))
        t2 = np.zeros((7, 3))
        self.ck.scatter_add_rows(t1, ids, g)
        self.pk.scatter_add_rows(t2, ids, g)
        assert_allclose(t1, t2, atol=1e-12)

    def test_adam_parity(self):
        p1, g = r(4, 3), r(4, 3)
        p2 = p1.copy()
        m1, v1 = np.zeros_like(p1), np.zeros_like(p1)
        m2, v2 = np.zeros_like(p1), np.zeros_like(p1)
        for t in range(1, 4):
            self.ck.adam_update(p1, g, m1, v1, 0.01, 0.9, 0.999, 1e-8, t)
            self.pk.adam_update(p2, g, m2, v2, 0.01, 0.9, 0.999, 1e-8, t)
        assert_allclose(p1, p2, atol=1e-14)
