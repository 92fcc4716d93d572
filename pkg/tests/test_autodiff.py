import numpy as np
import pytest

from moppa import (
    DimensionError,
    GradCheckError,
    Parameter,
    ParameterError,
    Tape,
    TapeError,
    frequency_grid,
    grad_check,
)
from moppa import autodiff as ad
from moppa.spectral import idct2d_raw


def check(build, params, eps=1e-4, tol=1e-5, seed=0):
    result = grad_check(build, params, eps=eps, seed=seed)
    assert result.max_rel_err < tol, result.per_param
    return result


def scalar_loss(node, tape, target):
    return ad.mse(node, tape.constant(target))


class TestElementwisePrimitives:
    def test_add_sub_mul_same_shape(self, rng):
        a = Parameter("a", rng.standard_normal((3, 4)))
        b = Parameter("b", rng.standard_normal((3, 4)))
        target = rng.standard_normal((3, 4))

        def build():
            tape = Tape()
            x = ad.mul(ad.add(tape.param(a), tape.param(b)),
                       ad.sub(tape.param(a), tape.param(b)))
            return tape, scalar_loss(x, tape, target)

        check(build, [a, b])

    def test_scalar_and_channel_vector_broadcast(self, rng):
        a = Parameter("a", rng.standard_normal((4, 3, 5)))
        s = Parameter("s", rng.standard_normal(()))
        v = Parameter("v", rng.standard_normal(5))
        target = rng.standard_normal((4, 3, 5))

        def build():
            tape = Tape()
            x = ad.add(ad.mul(tape.param(a), tape.param(s)),
                       ad.mul(tape.param(a), tape.param(v)))
            x = ad.add(x, tape.param(v))
            return tape, scalar_loss(x, tape, target)

        check(build, [a, s, v])

    def test_neg_scale_exp_cos_log(self, rng):
        a = Parameter("a", rng.uniform(0.5, 2.0, (3, 3)))
        target = rng.standard_normal((3, 3))

        def build():
            tape = Tape()
            x = ad.exp(ad.scale(ad.neg(tape.param(a)), 0.7))
            x = ad.add(x, ad.cos(tape.param(a)))
            x = ad.add(x, ad.log(tape.param(a)))
            return tape, scalar_loss(x, tape, target)

        check(build, [a])

    def test_reciprocal_offset(self, rng):
        a = Parameter("a", rng.uniform(0.0, 3.0, (4, 4)))
        target = rng.standard_normal((4, 4))

        def build():
            tape = Tape()
            return tape, scalar_loss(ad.reciprocal_offset(tape.param(a), 0.001), tape, target)

        check(build, [a])

    def test_hand_derivative_of_heat_exponential(self):
        # d/dk exp(-k * w^2 * t) at k=0.5, w^2=1, t=1 equals -exp(-0.5).
        k = Parameter("k", 0.5)
        tape = Tape()
        expr = ad.exp(ad.neg(ad.mul(ad.mul(tape.param(k), tape.constant(1.0)),
                                    tape.constant(1.0))))
        tape.backward(expr)
        assert abs(float(k.grad) - (-np.exp(-0.5))) < 1e-15
        assert abs(float(k.grad) - (-0.6065306597126334)) < 1e-12

    def test_disallowed_broadcast_rejected(self, rng):
        tape = Tape()
        a = tape.constant(rng.standard_normal((3, 4)))
        b = tape.constant(rng.standard_normal((4, 3)))
        with pytest.raises(DimensionError):
            ad.add(a, b)
        c = tape.constant(rng.standard_normal(3))  # matches the leading axis only
        with pytest.raises(DimensionError):
            ad.mul(a, c)


class TestLinearAlgebraPrimitives:
    def test_matmul_2d(self, rng):
        a = Parameter("a", rng.standard_normal((3, 4)))
        b = Parameter("b", rng.standard_normal((4, 2)))
        target = rng.standard_normal((3, 2))

        def build():
            tape = Tape()
            return tape, scalar_loss(ad.matmul(tape.param(a), tape.param(b)), tape, target)

        check(build, [a, b])

    def test_matmul_batched(self, rng):
        a = Parameter("a", rng.standard_normal((2, 3, 4)))
        b = Parameter("b", rng.standard_normal((2, 4, 3)))
        target = rng.standard_normal((2, 3, 3))

        def build():
            tape = Tape()
            return tape, scalar_loss(ad.matmul(tape.param(a), tape.param(b)), tape, target)

        check(build, [a, b])

    def test_matmul_shape_errors(self, rng):
        tape = Tape()
        a = tape.constant(rng.standard_normal((3, 4)))
        with pytest.raises(DimensionError):
            ad.matmul(a, tape.constant(rng.standard_normal((3, 4))))
        with pytest.raises(DimensionError):
            ad.matmul(a, tape.constant(rng.standard_normal(4)))

    def test_transpose_reshape_select(self, rng):
        a = Parameter("a", rng.standard_normal((2, 3, 4)))
        v = Parameter("v", rng.standard_normal(5))
        target = rng.standard_normal((4, 6))

        def build():
            tape = Tape()
            x = ad.reshape(ad.transpose(tape.param(a), (2, 0, 1)), (4, 6))
            x = ad.mul(x, ad.select(tape.param(v), 2))
            return tape, scalar_loss(x, tape, target)

        check(build, [a, v])

    def test_reductions_and_softmax(self, rng):
        a = Parameter("a", rng.standard_normal((3, 5)))

        def build():
            tape = Tape()
            x = ad.softmax(tape.param(a))
            return tape, ad.add(ad.sum_all(ad.mul(x, x)), ad.mean_all(tape.param(a)))

        check(build, [a])

    def test_router_logits_through_softmax_and_penalty(self, rng):
        lam = Parameter("lam", rng.normal(0, 1, 3))

        def build():
            tape = Tape()
            alpha = ad.softmax(tape.param(lam))
            return tape, ad.sum_all(ad.mul(alpha, ad.log(alpha)))

        check(build, [lam], eps=1e-5)


class TestNeuralPrimitives:
    def test_layer_norm(self, rng):
        x = Parameter("x", rng.standard_normal((6, 8)))
        g = Parameter("g", rng.uniform(0.5, 1.5, 8))
        b = Parameter("b", rng.standard_normal(8))
        target = rng.standard_normal((6, 8))

        def build():
            tape = Tape()
            return tape, scalar_loss(
                ad.layer_norm(tape.param(x), tape.param(g), tape.param(b)), tape, target
            )

        check(build, [x, g, b])

    def test_gelu(self, rng):
        x = Parameter("x", rng.standard_normal((5, 7)) * 2.0)
        target = rng.standard_normal((5, 7))

        def build():
            tape = Tape()
            return tape, scalar_loss(ad.gelu(tape.param(x)), tape, target)

        check(build, [x])

    def test_gelu_matches_reference_values(self):
        # tanh-approximation fixed points: gelu(0) = 0, gelu(large) ~ x.
        tape = Tape()
        y = ad.gelu(tape.constant(np.array([0.0, 10.0, -10.0])))
        np.testing.assert_allclose(y.value, [0.0, 10.0, 0.0], atol=1e-7)


class TestSpectralPrimitives:
    def test_dct_idct_gradients(self, rng):
        x = Parameter("x", rng.standard_normal((4, 6, 2)))
        target = rng.standard_normal((4, 6, 2))

        def build():
            tape = Tape()
            return tape, scalar_loss(ad.idct2d(ad.dct2d(tape.param(x))), tape, target)

        check(build, [x], tol=1e-7)

    def test_dct_backward_is_inverse_transform(self, rng):
        # d/dx sum(DCT(x) * G) must equal IDCT(G) exactly.
        x = Parameter("x", rng.standard_normal((5, 3, 2)))
        g = rng.standard_normal((5, 3, 2))
        tape = Tape()
        y = ad.sum_all(ad.mul(ad.dct2d(tape.param(x)), tape.constant(g)))
        tape.backward(y)
        assert np.max(np.abs(x.grad - idct2d_raw(g))) < 1e-12

    def test_expand_heads_and_tile_channels(self, rng):
        k = Parameter("k", rng.standard_normal((6, 2)))
        h2 = Parameter("h2", rng.standard_normal(3))
        target = rng.standard_normal((2, 3, 6))

        def build():
            tape = Tape()
            x = ad.mul(ad.expand_heads(tape.param(k), 2, 3, 6),
                       ad.tile_channels(tape.param(h2), 2))
            return tape, scalar_loss(x, tape, target)

        check(build, [k, h2])

    def test_expand_heads_semantics(self, rng):
        # Channel d must carry the coefficient of head d // (channels/heads).
        k = rng.standard_normal((6, 2))
        tape = Tape()
        full = ad.expand_heads(tape.constant(k), 3, 2, 4).value
        for p in range(3):
            for q in range(2):
                for d in range(4):
                    assert full[p, q, d] == k[p * 2 + q, d // 2]

    def test_fused_filter_primitives(self, rng):
        g = frequency_grid(3, 4)
        k = Parameter("k", rng.uniform(-0.3, 0.3, (12, 2)))
        t = Parameter("t", rng.uniform(0.0, 2.0, 6))
        c = Parameter("c", rng.uniform(-0.3, 0.3, (12, 2)))
        tw = Parameter("tw", rng.uniform(0.0, 2.0, 6))
        h1 = Parameter("h1", rng.standard_normal((12, 2)))
        h2 = Parameter("h2", rng.standard_normal(3))
        target = rng.standard_normal((3, 4, 6))

        def build():
            tape = Tape()
            x = ad.heat_filter(tape.param(k), tape.param(t), g.omega_sq, 3, 4, 6)
            x = ad.add(x, ad.wave_filter(tape.param(c), tape.param(tw), g.omega_abs, 3, 4, 6))
            x = ad.add(x, ad.poisson_source_field(
                tape.param(h1), tape.param(h2), 1.0 / (g.omega_sq + 0.001), 3, 4))
            return tape, scalar_loss(x, tape, target)

        check(build, [k, t, c, tw, h1, h2])

    def test_fused_filters_match_primitive_chain(self, rng):
        # The fused heat filter must equal expand/mul/exp composition exactly.
        g = frequency_grid(4, 4)
        k = rng.uniform(-0.2, 0.2, (16, 2))
        t = rng.uniform(0.0, 2.0, 8)
        tape = Tape()
        fused = ad.heat_filter(tape.constant(k), tape.constant(t), g.omega_sq, 4, 4, 8)
        om = tape.constant(np.ascontiguousarray(
            np.broadcast_to(g.omega_sq[:, :, None], (4, 4, 8))))
        chain = ad.exp(ad.neg(ad.mul(ad.mul(
            ad.expand_heads(tape.constant(k), 4, 4, 8), om), tape.constant(t))))
        assert np.max(np.abs(fused.value - chain.value)) < 1e-15


class TestMse:
    def test_value_and_gradient(self, rng):
        a = Parameter("a", rng.standard_normal((3, 3)))
        b = Parameter("b", rng.standard_normal((3, 3)))

        def build():
            tape = Tape()
            return tape, ad.mse(tape.param(a), tape.param(b))

        check(build, [a, b])
        tape = Tape()
        loss = ad.mse(tape.param(a), tape.param(b))
        assert abs(float(loss.value) - np.mean((a.value - b.value) ** 2)) < 1e-15

    def test_shape_mismatch(self, rng):
        tape = Tape()
        with pytest.raises(DimensionError):
            ad.mse(tape.constant(np.zeros((2, 2))), tape.constant(np.zeros((2, 3))))


class TestTapeMechanics:
    def test_multiple_consumers_sum_adjoints(self, rng):
        x = Parameter("x", rng.standard_normal(4))
        a = rng.standard_normal(4)
        b = rng.standard_normal(4)
        tape = Tape()
        leaf = tape.param(x)
        y = ad.add(ad.sum_all(ad.mul(leaf, tape.constant(a))),
                   ad.sum_all(ad.mul(leaf, tape.constant(b))))
        tape.backward(y)
        assert np.max(np.abs(x.grad - (a + b))) < 1e-12

    def test_gradient_of_sum_is_sum_of_gradients(self, rng):
        x = Parameter("x", rng.standard_normal((3, 3)))
        t1 = rng.standard_normal((3, 3))
        t2 = rng.standard_normal((3, 3))

        def run(targets):
            x.zero_grad()
            tape = Tape()
            leaf = tape.param(x)
            loss = None
            for t in targets:
                term = ad.mse(leaf, tape.constant(t))
                loss = term if loss is None else ad.add(loss, term)
            tape.backward(loss)
            return x.grad.copy()

        combined = run([t1, t2])
        separate = run([t1]) + run([t2])
        assert np.max(np.abs(combined - separate)) < 1e-12

    def test_frozen_parameter_receives_no_gradient(self, rng):
        frozen = Parameter("w", rng.standard_normal((3, 3)), trainable=False)
        live = Parameter("a", rng.standard_normal((3, 3)))
        tape = Tape()
        y = ad.mse(ad.matmul(tape.param(live), tape.param(frozen)),
                   tape.constant(rng.standard_normal((3, 3))))
        tape.backward(y)
        assert np.all(frozen.grad == 0.0)
        assert np.any(live.grad != 0.0)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            x = Parameter("x", rng.standard_normal((4, 4)))
            tape = Tape()
            y = ad.mse(ad.gelu(ad.matmul(tape.param(x), tape.param(x))),
                       tape.constant(rng.standard_normal((4, 4))))
            tape.backward(y)
            return y.value.copy(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)

    def test_adjoint_shapes_match_value_shapes(self, rng):
        x = Parameter("x", rng.standard_normal((2, 3, 4)))
        v = Parameter("v", rng.standard_normal(4))
        tape = Tape()
        out = ad.sum_all(ad.mul(tape.param(x), tape.param(v)))
        tape.backward(out)
        for node in tape._nodes:
            if node.adjoint is not None:
                assert np.asarray(node.adjoint).shape == node.value.shape

    def test_backward_misuse(self, rng):
        with pytest.raises(TapeError):
            Tape().backward(None)
        tape = Tape()
        vec = tape.constant(rng.standard_normal(3))
        with pytest.raises(TapeError):
            tape.backward(vec)  # non-scalar root
        other = Tape()
        scalar = other.constant(1.0)
        with pytest.raises(TapeError):
            tape.backward(scalar)  # foreign node
        ok = ad.sum_all(vec)
        tape.backward(ok)
        with pytest.raises(TapeError):
            tape.backward(ok)  # single-use


class TestGradCheckApi:
    def test_linear_function_is_exact(self, rng):
        x = Parameter("x", rng.standard_normal(6))
        coeff = rng.uniform(0.5, 1.5, 6)

        def build():
            tape = Tape()
            return tape, ad.sum_all(ad.mul(tape.param(x), tape.constant(coeff)))

        result = grad_check(build, [x], eps=1e-4)
        assert result.max_rel_err < 1e-9

    def test_eps_bounds_enforced(self, rng):
        x = Parameter("x", rng.standard_normal(2))

        def build():
            tape = Tape()
            return tape, ad.sum_all(tape.param(x))

        with pytest.raises(ParameterError):
            grad_check(build, [x], eps=1e-7)
        with pytest.raises(ParameterError):
            grad_check(build, [x], eps=1e-2)

    def test_non_finite_loss_reported(self):
        x = Parameter("x", np.array([1.0]))

        def build():
            tape = Tape()
            return tape, ad.sum_all(ad.log(ad.scale(tape.param(x), -1.0)))

        with pytest.raises(GradCheckError):
            grad_check(build, [x], eps=1e-4)

    def test_subsamples_large_parameters(self, rng):
        x = Parameter("x", rng.standard_normal(500))
        calls = 0

        def build():
            nonlocal calls
            calls += 1
            tape = Tape()
            return tape, ad.mean_all(ad.mul(tape.param(x), tape.param(x)))

        result = grad_check(build, [x], eps=1e-4, max_coords=64)
        assert result.max_rel_err < 1e-5
        assert calls == 1 + 2 * 64
