import itertools

import numpy as np
import pytest

from dualgap import matrix as mx
from dualgap.errors import ArgumentError, HypothesisViolation, InfeasibleError
from dualgap.linear_net import (
    LinearNetFactors,
    ProblemInstance,
    balanced_factorization,
    closed_form_global_product,
    gaussian_instance,
    nuclear_objective,
    primal_gradient,
    primal_local_search,
    primal_multistart,
    primal_objective,
    random_factors,
    regularizer,
)


def scalar_instance(gamma=0.5):
    return ProblemInstance(np.array([[1.0]]), np.array([[1.0]]), gamma, (1, 1, 1))


def diag_instance():
    return ProblemInstance(np.eye(3), np.diag([5.0, 3.0, 1.0]), 0.5, (3, 2, 3))


def diagonal_grid_oracle(y, gamma, d_min, step=1e-4):
    """Minimize 1/2 sum (y_i - z_i)^2 + gamma sum |z_i| over diagonal Z with at most d_min non-zeros."""
    grid = np.arange(-10.0, 10.0 + step / 2, step)
    per = [0.5 * (yi - grid) ** 2 + gamma * np.abs(grid) for yi in y]
    best_val = [p.min() for p in per]
    best_z = [grid[np.argmin(p)] for p in per]
    zero_val = [0.5 * yi ** 2 for yi in y]
    value, z_best = np.inf, None
    for support in itertools.combinations(range(len(y)), d_min):
        v = sum(best_val[i] if i in support else zero_val[i] for i in range(len(y)))
        if v < value:
            value = v
            z_best = [best_z[i] if i in support else 0.0 for i in range(len(y))]
    return value, np.diag(z_best)


class TestFactorsAndInstance:
    def test_rejects_bad_chain(self):
        with pytest.raises(ArgumentError):
            LinearNetFactors((np.ones((2, 3)), np.ones((4, 3))))
        with pytest.raises(ArgumentError):
            LinearNetFactors((np.ones((2, 3)),))

    def test_round_trip(self):
        f = random_factors((3, 2, 4), np.random.default_rng(0))
        g = LinearNetFactors.from_list(f.to_list())
        for a, b in zip(f.factors, g.factors):
            np.testing.assert_array_equal(a, b)

    def test_instance_validation(self):
        with pytest.raises(ArgumentError):
            ProblemInstance(np.eye(3), np.ones((2, 4)), 0.1, (3, 2, 2))
        with pytest.raises(ArgumentError):
            ProblemInstance(np.eye(3), np.ones((2, 3)), -1.0, (3, 2, 2))
        with pytest.raises(ArgumentError):
            ProblemInstance(np.eye(3), np.ones((2, 3)), 0.1, (3, 2))

    def test_dict_round_trip(self):
        p = gaussian_instance(n=6, H=2, d_min=3, seed=1)
        q = ProblemInstance.from_dict(p.to_dict())
        np.testing.assert_array_equal(q.Y, p.Y)
        assert q.gamma == p.gamma and q.dims == p.dims

    def test_y_tilde_projects_labels(self):
        p = gaussian_instance(n=8, d0=3, dH=4, H=2, d_min=2, x="gaussian", seed=2)
        np.testing.assert_allclose(p.Y_tilde, p.Y @ np.linalg.pinv(p.X) @ p.X, atol=1e-12)

    def test_well_posed_flags(self):
        p = gaussian_instance(n=6, H=2, d_min=3, gamma_ratio=0.5)
        assert p.well_posed
        assert not p.with_gamma(2 * p.sigma_min).gamma_ok


class TestPrimalObjective:
    def test_zero_network(self):
        p = gaussian_instance(n=5, H=3, d_min=2, seed=3)
        zero = LinearNetFactors(tuple(np.zeros((p.dims[i + 1], p.dims[i])) for i in range(p.H)))
        np.testing.assert_allclose(primal_objective(zero, p), 0.5 * np.sum(p.Y ** 2))

    def test_no_regularization_is_least_squares(self):
        p = gaussian_instance(n=5, H=2, d_min=2, seed=4).with_gamma(0.0)
        f = random_factors(p.dims, np.random.default_rng(0))
        R = p.Y - f.product() @ p.X
        np.testing.assert_allclose(primal_objective(f, p), 0.5 * np.sum(R ** 2))

    def test_scalar_value(self):
        w = np.array([[np.sqrt(0.5)]])
        np.testing.assert_allclose(primal_objective(LinearNetFactors((w, w)), scalar_instance()), 0.375)

    def test_dimension_mismatch(self):
        p = scalar_instance()
        with pytest.raises(ArgumentError):
            primal_objective(LinearNetFactors((np.ones((2, 1)), np.ones((1, 2)))), p)


class TestNuclearObjective:
    def test_zero(self):
        p = gaussian_instance(n=4, H=2, d_min=2)
        np.testing.assert_allclose(nuclear_objective(np.zeros_like(p.Y), p), 0.5 * np.sum(p.Y ** 2))

    def test_zero_residual(self):
        p = gaussian_instance(n=4, H=2, d_min=2)
        np.testing.assert_allclose(nuclear_objective(p.Y_tilde, p), p.gamma * mx.nuclear_norm(p.Y))

    def test_scalar(self):
        np.testing.assert_allclose(nuclear_objective([[0.5]], scalar_instance()), 0.375)

    def test_pythagorean_split(self):
        p = gaussian_instance(n=9, d0=4, dH=3, H=2, d_min=2, x="gaussian", seed=5)
        Z = mx.row_space_project(np.random.default_rng(1).normal(size=p.Y.shape), p.X)
        split = (0.5 * np.sum((p.Y_tilde - Z) ** 2) + p.gamma * mx.nuclear_norm(Z)
                 + 0.5 * np.sum((p.Y - p.Y_tilde) ** 2))
        np.testing.assert_allclose(nuclear_objective(Z, p), split, rtol=1e-12)


class TestBalancedFactorization:
    def test_zero(self):
        p = gaussian_instance(n=4, H=3, d_min=2)
        f = balanced_factorization(np.zeros_like(p.Y), p)
        assert all(np.all(W == 0) for W in f.factors)
        assert regularizer(f, p.X) == 0.0

    def test_square_root_split(self):
        p = ProblemInstance(np.eye(1), np.array([[5.0]]), 0.1, (1, 1, 1))
        f = balanced_factorization(np.array([[4.0]]), p)
        np.testing.assert_allclose(f.factors[0], [[2.0]])
        np.testing.assert_allclose(f.factors[1], [[2.0]])

    def test_random_rank_two(self):
        rng = np.random.default_rng(6)
        Z = rng.normal(size=(5, 2)) @ rng.normal(size=(2, 5))
        p = ProblemInstance(np.eye(5), rng.normal(size=(5, 5)), 0.1, (5, 3, 3, 5))
        f = balanced_factorization(Z, p)
        assert np.linalg.norm(f.product() @ p.X - Z) <= 1e-8 * (1 + np.linalg.norm(Z))
        np.testing.assert_allclose(regularizer(f, p.X), mx.nuclear_norm(Z), rtol=1e-8)

    def test_rank_too_large(self):
        rng = np.random.default_rng(7)
        p = ProblemInstance(np.eye(4), rng.normal(size=(4, 4)), 0.1, (4, 1, 4))
        with pytest.raises(InfeasibleError):
            balanced_factorization(rng.normal(size=(4, 4)), p)

    def test_row_space_violation(self):
        X = np.vstack([np.eye(4)[:2], np.zeros((1, 4))])
        p = ProblemInstance(X, np.ones((2, 4)), 0.1, (3, 2, 2))
        with pytest.raises(InfeasibleError):
            balanced_factorization(np.ones((2, 4)), p)

    def test_unbalanced_factors_dominate(self):
        rng = np.random.default_rng(8)
        p = ProblemInstance(np.eye(4), rng.normal(size=(4, 4)), 0.1, (4, 3, 3, 4))
        for _ in range(20):
            f = random_factors(p.dims, rng, scale=1.0)
            assert regularizer(f, p.X) >= mx.nuclear_norm(f.product() @ p.X) - 1e-12


class TestClosedForm:
    def test_no_shrinkage(self):
        p = gaussian_instance(n=6, H=2, d_min=3).with_gamma(0.0)
        np.testing.assert_allclose(closed_form_global_product(p), mx.truncated_svd(p.Y_tilde, 3), atol=1e-12)

    def test_scalar(self):
        np.testing.assert_allclose(closed_form_global_product(scalar_instance()), [[0.5]])

    def test_diagonal_against_grid_oracle(self):
        p = diag_instance()
        Z = closed_form_global_product(p)
        np.testing.assert_allclose(Z, np.diag([4.5, 2.5, 0.0]), atol=1e-12)
        value, Z_grid = diagonal_grid_oracle([5.0, 3.0, 1.0], 0.5, 2)
        np.testing.assert_allclose(Z, Z_grid, atol=1e-4)
        np.testing.assert_allclose(nuclear_objective(Z, p), value, atol=1e-7)

    def test_refuses_large_gamma(self):
        p = diag_instance().with_gamma(1.0)
        with pytest.raises(HypothesisViolation):
            closed_form_global_product(p)

    def test_refuses_wide_bottleneck(self):
        p = ProblemInstance(np.eye(2), np.eye(2), 0.1, (2, 3, 2))
        with pytest.raises(HypothesisViolation):
            closed_form_global_product(p)

    def test_optimal_against_perturbations(self):
        p = gaussian_instance(n=6, H=2, d_min=3, seed=9)
        Z = closed_form_global_product(p)
        best = nuclear_objective(Z, p)
        rng = np.random.default_rng(0)
        for _ in range(50):
            E = mx.truncated_svd(Z + 0.05 * rng.normal(size=Z.shape), 3)
            assert nuclear_objective(E, p) >= best - 1e-12


class TestGradient:
    @pytest.mark.parametrize("H", [2, 3, 4])
    def test_matches_finite_differences(self, H):
        rng = np.random.default_rng(H)
        p = gaussian_instance(n=5, d0=4, dH=3, H=H, d_min=2, x="gaussian", seed=H)
        for _ in range(3):
            f = random_factors(p.dims, rng, scale=1.0)
            grads = primal_gradient(f, p)
            for i, W in enumerate(f.factors):
                num = np.zeros_like(W)
                for idx in np.ndindex(W.shape):
                    E = np.zeros_like(W)
                    E[idx] = 1e-6
                    plus = list(f.factors)
                    minus = list(f.factors)
                    plus[i] = W + E
                    minus[i] = W - E
                    num[idx] = (primal_objective(LinearNetFactors(tuple(plus)), p)
                                - primal_objective(LinearNetFactors(tuple(minus)), p)) / 2e-6
                np.testing.assert_allclose(grads[i], num, rtol=1e-5, atol=1e-7)


class TestLocalSearch:
    def test_zero_learning_rate(self):
        p = gaussian_instance(n=4, H=2, d_min=2)
        f = random_factors(p.dims, np.random.default_rng(0))
        run = primal_local_search(f, p, steps=10, lr=0.0)
        for a, b in zip(run.factors.factors, f.factors):
            np.testing.assert_array_equal(a, b)

    def test_stationary_at_closed_form(self):
        p = gaussian_instance(n=6, H=3, d_min=3, seed=10)
        f = balanced_factorization(closed_form_global_product(p), p)
        run = primal_local_search(f, p, steps=200, lr=0.01)
        np.testing.assert_allclose(run.objective, run.initial_objective, atol=1e-6)

    def test_never_increases(self):
        p = gaussian_instance(n=5, H=3, d_min=2, seed=11)
        rng = np.random.default_rng(1)
        for _ in range(5):
            run = primal_local_search(random_factors(p.dims, rng, scale=2.0), p, steps=100, lr=1.0)
            assert run.objective <= run.initial_objective
            assert not run.failed

    def test_eckart_young_without_regularization(self):
        p = gaussian_instance(n=6, d0=6, dH=4, H=2, d_min=2, x="gaussian", seed=12).with_gamma(0.0)
        s = mx.singular_values(p.Y_tilde)
        target = 0.5 * np.sum(s[2:] ** 2) + 0.5 * np.sum((p.Y - p.Y_tilde) ** 2)
        run = primal_multistart(p, restarts=3, steps=4000, lr=0.05, seed=0)
        assert abs(run.objective - target) <= 1e-4

    def test_multistart_matches_closed_form(self):
        p = gaussian_instance(n=6, H=2, d_min=3, seed=13)
        value = nuclear_objective(closed_form_global_product(p), p)
        run = primal_multistart(p, restarts=3, steps=3000, lr=0.05, seed=0)
        np.testing.assert_allclose(run.objective, value, rtol=1e-6)

    def test_multistart_deterministic(self):
        p = gaussian_instance(n=4, H=2, d_min=2, seed=14)
        a = primal_multistart(p, restarts=2, steps=50, lr=0.05, seed=3)
        b = primal_multistart(p, restarts=2, steps=50, lr=0.05, seed=3)
        assert a.objective == b.objective and a.seed == b.seed
