import jax
import jax.numpy as jnp
import numpy as np
import pytest

from pinnensemble.errors import ContractViolation, NumericalError, TrainingDivergence
from pinnensemble.network import MlpArchitecture, NetworkParams, forward, init_params
from pinnensemble.problems import BoundaryOperator, DiffusionProblem, SourceProblem
from pinnensemble.training import (AdamState, AtConfig, DataPretrainer, JointTrainer, LossWeights, OptimConfig,
                                   PinnLoss, PretrainConfig, TrainingSet, adam_init, adam_step, fgm_perturbation,
                                   loss_adversarial, loss_bc, loss_data, loss_pde, total_loss)


def _const_net(c, input_dim=2):
    arch = MlpArchitecture(input_dim, 1, 2, 1)
    return NetworkParams(arch, (jnp.zeros((2, input_dim)), jnp.zeros((1, 2))), (jnp.zeros(2), jnp.array([c])))


def _linear_net(input_dim=1):
    """Single tiny hidden unit: output ~ x (tanh is linear near 0)."""
    arch = MlpArchitecture(input_dim, 1, 1, 1)
    W0 = jnp.zeros((1, input_dim)).at[0, 0].set(1e-4)
    return NetworkParams(arch, (W0, jnp.array([[1e4]])), (jnp.zeros(1), jnp.zeros(1)))


class TestDataLoss:
    def test_perfect_fit(self):
        X = np.random.default_rng(0).uniform(size=(5, 2))
        assert float(loss_data(_const_net(0.3), X, np.full(5, 0.3))) == 0.0

    def test_hand_value(self):
        # outputs (1, 2) from the linear net at x = 1, 2
        X = np.array([[1.0], [2.0]])
        assert float(loss_data(_linear_net(), X, np.array([1.1, 1.8]))) == pytest.approx(0.025, rel=1e-6)

    def test_empty(self):
        with pytest.raises(ContractViolation):
            loss_data(_const_net(0.0), np.zeros((0, 2)), np.zeros(0))


class TestFgm:
    def test_hand_value(self):
        np.testing.assert_allclose(fgm_perturbation(jnp.array([[3.0, 4.0]]), 0.1), [[0.06, 0.08]], atol=1e-16)

    def test_zero_gradient(self):
        np.testing.assert_array_equal(fgm_perturbation(jnp.zeros((2, 2)), 0.1), 0.0)

    def test_norm_equals_tau(self):
        g = np.random.default_rng(1).normal(size=(500, 3)) * np.logspace(-6, 6, 500)[:, None]
        n = np.linalg.norm(np.asarray(fgm_perturbation(jnp.asarray(g), 0.01)), axis=1)
        np.testing.assert_allclose(n, 0.01, rtol=0, atol=1e-12)

    def test_bad_tau(self):
        with pytest.raises(ContractViolation):
            fgm_perturbation(jnp.ones((1, 2)), 0.0)

    def test_constant_net_adversarial_equals_data(self):
        X = np.random.default_rng(0).uniform(size=(6, 2))
        d = np.random.default_rng(1).normal(size=6)
        u = _const_net(0.2)
        assert float(loss_adversarial(u, X, d, 0.01)) == float(loss_data(u, X, d))

    def test_small_tau_limit(self):
        u = init_params(MlpArchitecture(2, 2, 8, 1), 0)
        X = np.random.default_rng(0).uniform(size=(6, 2))
        d = np.zeros(6)
        gap = abs(float(loss_adversarial(u, X, d, 1e-9)) - float(loss_data(u, X, d)))
        assert gap < 1e-8

    def test_adversarial_increases_loss(self):
        u = init_params(MlpArchitecture(2, 2, 8, 1), 0)
        X = np.random.default_rng(0).uniform(size=(20, 2))
        d = np.random.default_rng(2).normal(size=20)
        assert float(loss_adversarial(u, X, d, 0.01)) > float(loss_data(u, X, d))

    def test_default_tau(self):
        assert AtConfig().resolve_tau(((0, 1), (0, 1))) == 0.01
        assert AtConfig().resolve_tau(((0, 1), (0, 0.03))) == pytest.approx(3e-4)
        with pytest.raises(ContractViolation):
            AtConfig(True, tau=-1.0).resolve_tau(((0, 1),))


class TestPdeAndBc:
    def test_zero_solution_source(self):
        p = SourceProblem()
        C = p.collocation_points((6, 6))
        assert float(loss_pde(_const_net(0.0), _const_net(0.0), C, p)) == 0.0

    def test_quadratic_source(self):
        # u = x^2 + y^2 has a constant Laplacian of 4
        p = SourceProblem()
        u = {(0, 0): jnp.full(10, 2.0), (1, 1): jnp.full(10, 2.0)}
        r = p.residual(u, {(): jnp.full(10, -0.08)}, None)
        assert float(jnp.mean(r**2)) == pytest.approx(0.0, abs=1e-30)

    def test_non_finite_residual_reports_point(self):
        p = SourceProblem()
        u = _const_net(0.0)
        bad = NetworkParams(u.arch, (u.weights[0], jnp.full((1, 2), jnp.nan)), u.biases)
        with pytest.raises(NumericalError, match="point"):
            loss_pde(bad, _const_net(0.0), p.collocation_points((3, 3)), p)

    def test_dirichlet_zero_net(self):
        ops = SourceProblem().boundary_operators()
        assert float(loss_bc(_const_net(0.0), ops)) == 0.0

    def test_dirichlet_hand_value(self):
        ops = [BoundaryOperator("a", "dirichlet", np.zeros((1, 2)), value=-0.1),
               BoundaryOperator("b", "dirichlet", np.zeros((1, 2)), value=0.3)]
        assert float(loss_bc(_const_net(0.0), ops)) == pytest.approx(0.05)

    def test_neumann_constant(self):
        ops = DiffusionProblem().boundary_operators()[:2]
        assert float(loss_bc(_const_net(1.7), ops)) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            loss_pde(_const_net(0.0), _const_net(0.0), np.zeros((3, 3)), SourceProblem())


def _small_set(problem, n_data=12, seed=0):
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in problem.input_bounds])
    hi = np.array([b[1] for b in problem.input_bounds])
    X = lo + (hi - lo) * rng.uniform(size=(n_data, 2))
    return TrainingSet(X, rng.normal(size=n_data), problem.collocation_points((5, 6)),
                       problem.boundary_operators())


class TestTotalLoss:
    def test_all_zero(self):
        p = SourceProblem()
        ts = TrainingSet(np.zeros((3, 2)), np.zeros(3), p.collocation_points((4, 4)), p.boundary_operators())
        assert float(total_loss(_const_net(0.0), _const_net(0.0), p, ts, LossWeights(), AtConfig())) == 0.0

    def test_weighted_sum(self):
        p = DiffusionProblem()
        from pinnensemble.ensemble import architectures
        ua, qa = architectures(p)
        u, q = init_params(ua, 0), init_params(qa, 1)
        ts = _small_set(p)
        w = LossWeights(1.0, 1e-3, 1e-3)
        L = PinnLoss(p, ts, w, AtConfig(True))
        c = {k: float(v) for k, v in L.components(u, q).items()}
        assert set(c) == {"data", "at", "pde", "bc"}
        expect = c["data"] + c["at"] + 1e-3 * c["pde"] + 1e-3 * c["bc"]
        assert float(L.total(u, q)) == pytest.approx(expect, rel=1e-12)
        assert all(v >= 0 for v in c.values())

    def test_qoi_term(self):
        p = DiffusionProblem()
        from pinnensemble.ensemble import architectures
        ua, qa = architectures(p)
        u, q = init_params(ua, 0), init_params(qa, 1)
        xs = np.array([[0.25], [0.5]])
        ts = _small_set(p).with_qoi(xs, np.array([1.0, 0.0]))
        c = PinnLoss(p, ts, LossWeights(1, 1e-3, 1e-3), AtConfig(False)).components(u, q)
        m = np.log(np.asarray(forward(q, xs))[:, 0] - 0.1)
        assert float(c["qoi"]) == pytest.approx(np.mean((m - [1.0, 0.0]) ** 2), rel=1e-12)

    def test_weights_validation(self):
        with pytest.raises(ContractViolation):
            LossWeights(-1.0, 1.0, 1.0)
        with pytest.raises(ContractViolation):
            LossWeights(0.0, 0.0, 0.0)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": jnp.array([1.0, -2.0])}
        st = adam_init(p, 0.003)
        q, st2 = adam_step(p, {"w": jnp.zeros(2)}, st)
        np.testing.assert_array_equal(q["w"], p["w"])
        assert isinstance(st2, AdamState)

    def test_first_step_magnitude(self):
        p = {"w": jnp.array([1.0, -2.0, 0.5])}
        g = {"w": jnp.array([0.3, -7.0, 1e-3])}
        q, _ = adam_step(p, g, adam_init(p, 0.003))
        np.testing.assert_allclose(np.abs(np.asarray(q["w"] - p["w"])), 0.003, rtol=1e-4)

    def test_quadratic_decreases(self):
        p = {"w": jnp.array([1.0, -2.0])}
        f = lambda t: jnp.sum(t["w"] ** 2)
        st = adam_init(p, 0.01)
        q, _ = adam_step(p, jax.grad(f)(p), st)
        assert float(f(q)) < float(f(p))

    def test_non_finite_gradient(self):
        p = {"w": jnp.ones(2)}
        with pytest.raises(NumericalError):
            adam_step(p, {"w": jnp.array([1.0, jnp.inf])}, adam_init(p, 0.01))


class TestPretrain:
    def test_already_fit_returns_immediately(self):
        X = np.random.default_rng(0).uniform(size=(5, 2))
        res = DataPretrainer(X, np.full(5, 0.4), OptimConfig(), PretrainConfig())(_const_net(0.4))
        assert res.steps == 0 and res.reached

    def test_linear_data_reaches_threshold(self):
        X = np.linspace(-1, 1, 20)[:, None]
        d = 0.5 * X[:, 0] + 0.2
        u = init_params(MlpArchitecture(1, 2, 10, 1), 0)
        res = DataPretrainer(X, d, OptimConfig(), PretrainConfig(delta=1e-4, max_steps=5000))(u)
        assert res.reached and res.loss < 1e-4 and res.status == "ok"

    def test_threshold_not_reached_is_warning(self):
        X = np.random.default_rng(0).uniform(size=(50, 1))
        d = np.random.default_rng(1).normal(size=50)
        u = init_params(MlpArchitecture(1, 1, 2, 1), 0)
        res = DataPretrainer(X, d, OptimConfig(), PretrainConfig(delta=1e-8, max_steps=30))(u)
        assert not res.reached and res.steps == 30 and res.status.startswith("warning")


class TestJointTrainer:
    def test_loss_decreases_and_traces(self):
        p = DiffusionProblem()
        from pinnensemble.ensemble import architectures
        ua, qa = architectures(p)
        L = PinnLoss(p, _small_set(p), LossWeights(1, 1e-3, 1e-3), AtConfig(True))
        res = JointTrainer(L, OptimConfig(steps=60, trace_every=20)).train(init_params(ua, 0), init_params(qa, 1), 60)
        assert [r["step"] for r in res.trace] == [0, 20, 40, 60]
        assert res.trace[-1]["total"] < res.trace[0]["total"]

    def test_divergence_names_step(self):
        p = SourceProblem()
        ts = TrainingSet(np.zeros((3, 2)), np.array([0.0, np.inf, 0.0]), p.collocation_points((3, 3)),
                         p.boundary_operators())
        L = PinnLoss(p, ts, LossWeights(), AtConfig(False))
        u = init_params(MlpArchitecture(2, 1, 3, 1), 0)
        with pytest.raises(TrainingDivergence) as exc:
            JointTrainer(L, OptimConfig(steps=5, trace_every=5)).train(u, init_params(MlpArchitecture(2, 1, 3, 1), 1), 5)
        assert exc.value.step is not None
