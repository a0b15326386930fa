import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from pinnensemble import autodiff as ad
from pinnensemble.autodiff import (Dual, Tape, directional_derivative, grad_params, hessian_reference,
                                   input_derivatives, record_and_evaluate, taylor_forward)
from pinnensemble.errors import ContractViolation, UnsupportedOpError, UnsupportedOrderError
from pinnensemble.network import MlpArchitecture, NetworkParams, forward, init_params


def _fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestScalarTape:
    def test_square(self):
        v, g = record_and_evaluate(lambda x: x**2, [3.0])
        assert v == 9.0
        assert g.gradient()[0] == pytest.approx(6.0)

    def test_tanh_origin(self):
        v, _ = record_and_evaluate(lambda x: ad.tanh(x), [0.0])
        assert v == 0.0

    def test_product_plus(self):
        v, g = record_and_evaluate(lambda x, y: x * y + y, [2.0, 5.0])
        assert v == 15.0
        np.testing.assert_allclose(g.gradient(), [5.0, 3.0])

    def test_sum_gradient_is_ones(self):
        _, g = record_and_evaluate(lambda *t: sum(t[1:], t[0]), [0.1, -2.0, 3.0, 4.5, 7.0])
        np.testing.assert_array_equal(g.gradient(), np.ones(5))

    def test_graph_topologically_ordered(self):
        tape = Tape()
        record_and_evaluate(lambda x, y: ad.exp(x * y) / (1 + y), [0.3, 0.7], tape)
        for i, ops in enumerate(tape.operands):
            for o in ops:
                if isinstance(o, int):
                    assert o < i

    def test_replay_is_bit_exact(self):
        prog = lambda x, y: ad.tanh(x) * ad.sin(y) + ad.log(1 + x * x) - y / (2 + x)
        v, g = record_and_evaluate(prog, [0.37, -1.2])
        assert g.replay([0.37, -1.2]) == v

    def test_replay_new_leaves(self):
        prog = lambda x, y: x * ad.exp(y) - x**2
        _, g = record_and_evaluate(prog, [1.0, 2.0])
        assert g.replay([0.5, -1.0]) == pytest.approx(0.5 * math.exp(-1.0) - 0.25)

    def test_tape_reset_reuses_storage(self):
        tape = Tape()
        record_and_evaluate(lambda x: x * x + x, [2.0], tape)
        kinds = tape.kinds
        n = len(tape)
        record_and_evaluate(lambda x: x * x + x, [3.0], tape)
        assert tape.kinds is kinds
        assert len(tape) == n

    def test_unsupported_op(self):
        with pytest.raises(UnsupportedOpError):
            record_and_evaluate(lambda x: abs(x), [1.0])
        with pytest.raises(UnsupportedOpError):
            record_and_evaluate(lambda x: x**3, [1.0])

    def test_affine_node(self):
        v, g = record_and_evaluate(lambda a, b: ad.affine([a, b], [2.0, -3.0], 0.5), [1.0, 4.0])
        assert v == pytest.approx(2.0 - 12.0 + 0.5)
        np.testing.assert_allclose(g.gradient(), [2.0, -3.0])


OPS = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "div": lambda x, y: x / (y + 3.0),
    "neg": lambda x, y: -x + 0.0 * y,
    "square": lambda x, y: x**2 + y,
    "tanh": lambda x, y: ad.tanh(x * y),
    "exp": lambda x, y: ad.exp(x - y),
    "log": lambda x, y: ad.log(x * x + y * y + 1.0),
    "sin": lambda x, y: ad.sin(x) * y,
    "affine": lambda x, y: ad.affine([x, y], [0.3, -1.7], 0.2),
}


class TestForwardReverseAgreement:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_reverse_equals_forward(self, name):
        prog = OPS[name]
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(5):
            x = rng.uniform(-1.5, 1.5, 2)
            _, g = record_and_evaluate(prog, x)
            rev = g.gradient()
            fwd = [directional_derivative(prog, x, e) for e in np.eye(2)]
            np.testing.assert_allclose(rev, fwd, rtol=0, atol=1e-12)

    def test_dual_chain_rule(self):
        x = Dual(0.4, 1.0)
        y = ad.tanh(ad.sin(x))
        assert y.tangent == pytest.approx((1 - math.tanh(math.sin(0.4)) ** 2) * math.cos(0.4), abs=1e-14)

    def test_tape_matches_fd(self):
        prog = lambda a, b, c: ad.tanh(a * b - c) * ad.exp(0.3 * c) + a / (1.0 + b * b)
        x = np.array([0.2, -0.7, 1.1])
        _, g = record_and_evaluate(prog, x)
        f = lambda v: record_and_evaluate(prog, v)[0]
        np.testing.assert_allclose(g.gradient(), _fd_grad(f, x), rtol=1e-8)


def _toy_params(Ws, bs, input_dim=1):
    arch = MlpArchitecture(input_dim, len(Ws) - 1, Ws[0].shape[0], Ws[-1].shape[0])
    return NetworkParams(arch, tuple(jnp.asarray(w, float) for w in Ws), tuple(jnp.asarray(b, float) for b in bs))


class TestGradParams:
    def test_theta_squared(self):
        assert grad_params(lambda t: t**2, jnp.array(3.0))[0] == pytest.approx(6.0)

    def test_sum_of_params(self):
        np.testing.assert_array_equal(grad_params(lambda t: jnp.sum(t), jnp.arange(5.0)), np.ones(5))

    def test_non_scalar_root(self):
        with pytest.raises(ContractViolation):
            grad_params(lambda t: t * 2.0, jnp.arange(3.0))

    def test_mse_two_layer_net_vs_fd(self):
        arch = MlpArchitecture(2, 2, 8, 1)
        p = init_params(arch, 3)
        rng = np.random.default_rng(0)
        X, d = rng.uniform(-1, 1, (4, 2)), rng.normal(size=4)
        flat, unravel = jax.flatten_util.ravel_pytree(p)
        loss = lambda q: jnp.mean((forward(q, X)[:, 0] - d) ** 2)
        g = grad_params(loss, p)
        fd = _fd_grad(lambda v: float(loss(unravel(jnp.asarray(v)))), np.asarray(flat), h=1e-5)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


class TestInputDerivatives:
    def test_linear_neuron(self):
        # tanh is linear near 0, so a tiny inner weight gives u = w x up to 1e-8
        w = 1.7
        p = _toy_params([np.array([[1e-4]]), np.array([[w * 1e4]])], [np.zeros(1), np.zeros(1)])
        d = input_derivatives(p, jnp.array([0.0]), [(0,), (0, 0)])
        assert float(d[(0,)]) == pytest.approx(w, rel=1e-7)
        assert abs(float(d[(0, 0)])) < 1e-12

    def test_tanh_at_origin(self):
        p = _toy_params([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        d = input_derivatives(p, jnp.array([0.0]), [(0,), (0, 0)])
        assert float(d[(0,)]) == 1.0
        assert float(d[(0, 0)]) == 0.0

    def test_order_three_rejected(self):
        p = init_params(MlpArchitecture(2, 1, 3, 1), 0)
        with pytest.raises(UnsupportedOrderError):
            input_derivatives(p, jnp.zeros(2), [(0, 0, 1)])

    def test_dimension_mismatch(self):
        p = init_params(MlpArchitecture(2, 1, 3, 1), 0)
        with pytest.raises(ContractViolation):
            input_derivatives(p, jnp.zeros(3), [(0,)])

    def test_matches_forward_over_reverse(self):
        p = init_params(MlpArchitecture(2, 4, 20, 1, input_bounds=((0, 1), (0, 0.03))), 11)
        rng = np.random.default_rng(1)
        for x in rng.uniform([0, 0], [1, 0.03], (5, 2)):
            H = np.asarray(hessian_reference(p, x))
            d = input_derivatives(p, jnp.asarray(x), [(0, 0), (0, 1), (1, 1)])
            np.testing.assert_allclose([d[(0, 0)], d[(0, 1)], d[(1, 1)]], [H[0, 0], H[0, 1], H[1, 1]],
                                       rtol=1e-10, atol=1e-10 * np.abs(H).max())

    def test_mixed_partials_symmetric(self):
        p = init_params(MlpArchitecture(2, 4, 20, 1), 5)
        X = np.random.default_rng(2).uniform(-1, 1, (10, 2))
        H = np.stack([np.asarray(hessian_reference(p, x)) for x in X])
        np.testing.assert_allclose(H[:, 0, 1], H[:, 1, 0], atol=1e-10)
        out = taylor_forward(p, X, [(0, 1), (1, 0)])
        assert set(out) >= {(0, 1)}

    def test_softplus_output_channels(self):
        arch = MlpArchitecture(1, 2, 6, 1, output_transform="softplus_floor", output_floor=0.1)
        p = init_params(arch, 4)
        x = jnp.linspace(-0.9, 0.9, 7)[:, None]
        out = taylor_forward(p, x, [(0,), (0, 0)])
        f = lambda s: forward(p, s[None, None])[0, 0]
        g1 = jax.vmap(jax.grad(f))(x[:, 0])
        g2 = jax.vmap(jax.grad(jax.grad(f)))(x[:, 0])
        np.testing.assert_allclose(out[(0,)][:, 0], g1, rtol=1e-12)
        np.testing.assert_allclose(out[(0, 0)][:, 0], g2, rtol=1e-10, atol=1e-12)
        assert np.all(np.asarray(out[()]) > 0.1)

    def test_derivatives_differentiable_wrt_params(self):
        p = init_params(MlpArchitecture(2, 2, 5, 1), 9)
        x = jnp.array([0.3, -0.2])
        g = jax.grad(lambda q: input_derivatives(q, x, [(0, 0)])[(0, 0)])(p)
        assert all(np.all(np.isfinite(np.asarray(w))) for w in jax.tree_util.tree_leaves(g))

    def test_fast_tanh_matches_tanh(self):
        z = jnp.linspace(-30, 30, 2001)
        np.testing.assert_allclose(ad.fast_tanh(z), jnp.tanh(z), rtol=1e-15, atol=2e-16)
        np.testing.assert_allclose(jax.vmap(jax.grad(ad.fast_tanh))(z), 1 - jnp.tanh(z) ** 2, atol=1e-15)
        assert float(jax.grad(ad.fast_tanh)(0.0)) == 1.0
