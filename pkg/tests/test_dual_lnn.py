import json

import numpy as np
import pytest

from dualgap import matrix as mx
from dualgap.dual_lnn import (
    GapReportLNN,
    check_dual_conditions,
    closed_form_certificate,
    dual_objective,
    duality_gap_report,
    make_certificate,
    recover_primal_from_dual,
    solve_dual_projected_ascent,
    stationarity_residuals,
)
from dualgap.errors import ArgumentError, HypothesisViolation
from dualgap.linear_net import (
    ProblemInstance,
    balanced_factorization,
    closed_form_global_product,
    gaussian_instance,
    nuclear_objective,
    primal_objective,
)


def scalar_instance():
    return ProblemInstance(np.array([[1.0]]), np.array([[1.0]]), 0.5, (1, 1, 1))


def two_by_two(d_min):
    return ProblemInstance(np.eye(2), np.diag([3.0, 1.0]), 0.5, (2, d_min, 2))


class TestDualObjective:
    def test_scalar_certificate(self):
        p = scalar_instance()
        c = closed_form_certificate(p)
        np.testing.assert_allclose(c.lam, [[0.5]])
        assert c.feasible
        np.testing.assert_allclose(dual_objective(c, p), 0.375)

    def test_outside_ball_is_minus_infinity(self):
        p = scalar_instance()
        c = make_certificate([[0.6]], p)
        assert not c.spectral_ok
        assert dual_objective(c, p) == -np.inf

    def test_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            make_certificate(np.zeros((2, 2)), scalar_instance())

    def test_weak_duality_on_random_feasible_points(self):
        p = gaussian_instance(n=6, H=3, d_min=3, seed=20)
        primal = nuclear_objective(closed_form_global_product(p), p)
        rng = np.random.default_rng(0)
        for _ in range(100):
            lam = mx.spectral_ball_project(mx.row_space_project(rng.normal(size=p.Y.shape), p.X), p.gamma)
            assert dual_objective(make_certificate(lam, p), p) <= primal + 1e-10

    @pytest.mark.parametrize("d_min,value", [(2, 1.75), (1, 1.875)])
    def test_hand_computed(self, d_min, value):
        p = two_by_two(d_min)
        c = closed_form_certificate(p)
        np.testing.assert_allclose(c.lam, 0.5 * np.eye(2), atol=1e-15)
        np.testing.assert_allclose(dual_objective(c, p), value, rtol=1e-14)
        np.testing.assert_allclose(nuclear_objective(closed_form_global_product(p), p), value, rtol=1e-14)


class TestClosedFormCertificate:
    def test_diagonal(self):
        p = ProblemInstance(np.eye(3), np.diag([5.0, 3.0, 1.0]), 0.5, (3, 2, 3))
        c = closed_form_certificate(p)
        np.testing.assert_allclose(c.lam, 0.5 * np.eye(3), atol=1e-15)
        Z = closed_form_global_product(p)
        np.testing.assert_allclose(dual_objective(c, p), nuclear_objective(Z, p), rtol=1e-13)

    def test_no_regularization(self):
        p = gaussian_instance(n=5, H=2, d_min=2).with_gamma(0.0)
        c = closed_form_certificate(p)
        np.testing.assert_array_equal(c.lam, np.zeros_like(p.Y))

    def test_refuses_violations(self):
        p = gaussian_instance(n=5, H=2, d_min=2)
        with pytest.raises(HypothesisViolation):
            closed_form_certificate(p.with_gamma(2 * p.sigma_min))

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_gap_gaussian(self, seed):
        p = gaussian_instance(n=8, d0=8, dH=6, H=3, d_min=3, x="gaussian", seed=seed)
        c = closed_form_certificate(p)
        f = balanced_factorization(closed_form_global_product(p), p)
        gap = primal_objective(f, p) - dual_objective(c, p)
        assert abs(gap) <= 1e-10 * (1 + primal_objective(f, p))

    def test_recovers_scalar_factors(self):
        p = scalar_instance()
        f = recover_primal_from_dual(closed_form_certificate(p), p)
        for W in f.factors:
            np.testing.assert_allclose(W, [[np.sqrt(0.5)]])


class TestDualConditions:
    def test_pass_at_optimum(self):
        p = gaussian_instance(n=6, H=3, d_min=3, seed=21)
        rep = check_dual_conditions(closed_form_global_product(p), closed_form_certificate(p), p)
        assert rep.pass_
        assert rep.spectral_margin > 0
        assert max(rep.stationarity_residuals) <= 1e-8

    def test_zero_certificate_fails(self):
        p = gaussian_instance(n=6, H=3, d_min=3, seed=21)
        rep = check_dual_conditions(closed_form_global_product(p), make_certificate(np.zeros_like(p.Y), p), p)
        assert not rep.pass_
        assert rep.subgradient_residual > 1e-3

    def test_tangent_perturbation_fails(self):
        p = gaussian_instance(n=6, H=2, d_min=3, seed=22)
        Z = closed_form_global_product(p)
        U, _, V = mx.svd(Z).skinny()
        c = closed_form_certificate(p)
        pert = make_certificate(c.lam + 1e-3 * U[:, :1] @ V[:, :1].T, p)
        assert not check_dual_conditions(Z, pert, p).pass_

    def test_report_dict(self):
        p = scalar_instance()
        d = check_dual_conditions([[0.5]], closed_form_certificate(p), p).to_dict()
        assert d["pass"] is True
        json.dumps(d)

    def test_stationarity_scalar(self):
        p = scalar_instance()
        f = balanced_factorization(np.array([[0.5]]), p)
        np.testing.assert_allclose(stationarity_residuals(f, [[0.5]], p), [0.0, 0.0], atol=1e-15)


class TestProjectedAscent:
    def test_scalar_converges(self):
        p = scalar_instance()
        c = solve_dual_projected_ascent(p, max_iters=5000)
        np.testing.assert_allclose(c.lam, [[0.5]], atol=1e-6)
        assert c.meta["converged"]

    def test_zero_gamma_returns_immediately(self):
        p = gaussian_instance(n=4, H=2, d_min=2).with_gamma(0.0)
        c = solve_dual_projected_ascent(p)
        assert c.meta["iterations"] == 0
        np.testing.assert_array_equal(c.lam, 0.0)

    def test_trace_monotone(self):
        p = gaussian_instance(n=6, H=2, d_min=3, seed=23)
        c = solve_dual_projected_ascent(p, max_iters=300, record_trace=True)
        assert np.all(np.diff(c.meta["trace"]) >= 0)
        assert c.feasible

    def test_reaches_closed_form_value(self):
        p = gaussian_instance(n=10, H=3, d_min=5, seed=24)
        c = solve_dual_projected_ascent(p, max_iters=5000)
        target = dual_objective(closed_form_certificate(p), p)
        assert dual_objective(c, p) <= target + 1e-10
        assert target - dual_objective(c, p) <= 1e-6 * (1 + abs(target))


class TestGapReport:
    def test_well_posed_report(self):
        p = gaussian_instance(n=8, H=3, d_min=4, seed=25)
        rep = duality_gap_report(p, restarts=0, dual_max_iters=0)
        assert rep.hypothesis_ok and rep.conditions_pass
        assert rep.strong_duality_ok()
        np.testing.assert_allclose(rep.nuclear_closed, rep.primal_closed, rtol=1e-10)

    def test_violation_flagged_not_raised(self):
        p = gaussian_instance(n=6, H=2, d_min=3)
        rep = duality_gap_report(p.with_gamma(3 * p.sigma_min), dual_max_iters=0)
        assert not rep.hypothesis_ok
        assert rep.message
        assert np.isnan(rep.gap_closed)
        assert not rep.strong_duality_ok()

    def test_serialization(self):
        rep = duality_gap_report(scalar_instance(), dual_max_iters=50)
        d = json.loads(rep.to_json())
        assert d["d_min"] == 1
        lines = rep.to_csv().strip().split("\n")
        assert lines[0].split(",") == GapReportLNN.csv_header()
        assert len(lines[1].split(",")) == len(GapReportLNN.csv_header())

    def test_with_local_search(self):
        p = gaussian_instance(n=5, H=2, d_min=2, seed=26)
        rep = duality_gap_report(p, restarts=2, local_steps=2000, local_lr=0.05, dual_max_iters=0)
        assert rep.local_restarts == 2
        assert rep.primal_local >= rep.primal_closed - 1e-10
