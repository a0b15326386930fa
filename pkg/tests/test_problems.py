import math

import jax.numpy as jnp
import numpy as np
import pytest

from pinnensemble.autodiff import taylor_forward
from pinnensemble.errors import ContractViolation
from pinnensemble.network import MlpArchitecture, init_params
from pinnensemble.oracle import squared_exponential
from pinnensemble.problems import (BoundaryOperator, DiffusionProblem, SourceProblem, boundary_operators,
                                   diffusion_residual, gaussian_source_1d, source_residual)


class TestSourceProblem:
    def test_zero_field(self):
        u = {(0, 0): jnp.zeros(3), (1, 1): jnp.zeros(3)}
        np.testing.assert_array_equal(source_residual(u, jnp.zeros(3)), 0.0)

    def test_quadratic_manufactured(self):
        u = {(0, 0): jnp.full(4, 2.0), (1, 1): jnp.full(4, 2.0)}
        np.testing.assert_allclose(source_residual(u, jnp.full(4, -0.08), 0.02), 0.0, atol=1e-15)

    def test_missing_derivative(self):
        with pytest.raises(ContractViolation):
            source_residual({(0, 0): jnp.zeros(1)}, jnp.zeros(1))

    def test_true_source_peaks(self):
        p = SourceProblem()
        assert p.true_qoi(np.array([[0.3, 0.4]]))[0] == pytest.approx(1.0, abs=1e-12)
        # the broad first source still contributes exp(-9.1) at the second centre
        tail = math.exp(-0.5 * (0.5**2 + 0.4**2) / 0.15**2)
        assert p.true_qoi(np.array([[0.8, 0.8]]))[0] == pytest.approx(2.0 + tail, rel=1e-12)
        X = np.random.default_rng(0).uniform(size=(1000, 2))
        assert np.all(p.true_qoi(X) >= 0)

    def test_invalid_parameters(self):
        with pytest.raises(ContractViolation):
            SourceProblem(lam=0.0)
        with pytest.raises(ContractViolation):
            SourceProblem(centers=((1.3, 0.4), (0.8, 0.8)))

    def test_boundary_on_edges(self):
        (op,) = SourceProblem().boundary_operators()
        pts = op.points
        on_edge = np.isclose(pts, 0).any(axis=1) | np.isclose(pts, 1).any(axis=1)
        assert on_edge.all()
        assert len(np.unique(pts, axis=0)) == len(pts)

    def test_collocation_count(self):
        assert SourceProblem().collocation_points().shape == (2400, 2)


class TestDiffusionProblem:
    def test_source_prefactor(self):
        s = gaussian_source_1d(np.array([0.5]), np.array([0.0]))
        single = 100.0 / (math.sqrt(2 * math.pi) * math.sqrt(1e-3))
        assert single == pytest.approx(1261.57, abs=0.01)
        side = 2 * single * math.exp(-0.25**2 / 2e-3)
        assert s[0] == pytest.approx(single + side, rel=1e-12)

    def test_heaviside_window(self):
        x = np.full(3, 0.5)
        s = gaussian_source_1d(x, np.array([0.0099, 0.01, 0.02]))
        assert s[0] > 0 and s[1] == 0 and s[2] == 0

    def test_zero_field_after_cutoff(self):
        u = {(1,): jnp.zeros(2), (0,): jnp.zeros(2), (0, 0): jnp.zeros(2)}
        r = diffusion_residual(u, jnp.array([0.7, 2.0]), {(0,): jnp.array([1.0, -3.0])},
                               jnp.array([[0.3, 0.02], [0.6, 0.015]]))
        np.testing.assert_array_equal(r, 0.0)

    def test_missing_derivative(self):
        with pytest.raises(ContractViolation):
            diffusion_residual({(1,): jnp.zeros(1)}, jnp.ones(1), {(0,): jnp.zeros(1)}, jnp.zeros((1, 2)))

    def test_product_rule_vs_fd(self):
        p = DiffusionProblem()
        u_arch = MlpArchitecture(2, 3, 10, 1, input_bounds=p.input_bounds)
        q_arch = MlpArchitecture(1, 3, 10, 1, input_bounds=(p.input_bounds[0],),
                                 output_transform="softplus_floor", output_floor=0.1)
        u, q = init_params(u_arch, 0), init_params(q_arch, 1)
        X = np.random.default_rng(3).uniform([0.1, 0.012], [0.9, 0.028], (8, 2))
        ud = {k: v[:, 0] for k, v in taylor_forward(u, X, p.u_orders).items()}
        qd = {k: v[:, 0] for k, v in taylor_forward(q, X[:, :1], p.q_orders).items()}
        r = np.asarray(p.residual(ud, qd, X))
        h = 1e-5

        def flux(xs):
            pts = np.c_[xs, X[:, 1]]
            v = taylor_forward(q, xs[:, None])[()][:, 0]
            ux = taylor_forward(u, pts, [(0,)])[(0,)][:, 0]
            return np.asarray(v * ux)

        div = (flux(X[:, 0] + h) - flux(X[:, 0] - h)) / (2 * h)
        ut = np.asarray(ud[(1,)])
        np.testing.assert_allclose(r, ut - div, rtol=1e-6, atol=1e-6 * np.abs(div).max())

    def test_log_transform_roundtrip(self):
        p = DiffusionProblem()
        x = np.linspace(0, 1, 33)
        v = p.true_diffusivity(x)
        assert np.all(v > 0.1)
        np.testing.assert_allclose(p.qoi_metric_transform(v), np.sin(2 * np.pi * x), atol=1e-14)

    def test_three_operators(self):
        ops = boundary_operators(DiffusionProblem())
        assert [o.kind for o in ops] == ["neumann", "neumann", "dirichlet"]
        assert np.all(ops[2].points[:, 1] == 0)

    def test_neumann_on_constant_field(self):
        op = BoundaryOperator("left", "neumann", np.zeros((4, 2)), dim=0)
        assert np.all(op.residual({(): jnp.full(4, 3.0), (0,): jnp.zeros(4)}) == 0)

    def test_collocation_shape(self):
        C = DiffusionProblem().collocation_points()
        assert C.shape == (5000, 2)
        assert C[:, 1].max() == pytest.approx(0.03)


class TestOperators:
    def test_unknown_kind(self):
        with pytest.raises(ContractViolation):
            BoundaryOperator("x", "robin", np.zeros((1, 2)))

    def test_empty(self):
        with pytest.raises(ContractViolation):
            BoundaryOperator("x", "dirichlet", np.zeros((0, 2)))

    def test_grf_covariance(self):
        assert squared_exponential(np.array([0.0]), np.array([0.3]))[0, 0] == pytest.approx(math.exp(-0.5))
        assert squared_exponential(np.array([0.4]), np.array([0.4]))[0, 0] == 1.0
