"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest

from dualgap import matrix as mx
from dualgap.dual_lnn import (
    check_dual_conditions,
    closed_form_certificate,
    dual_objective,
    make_certificate,
    solve_dual_projected_ascent,
)
from dualgap.geometry import convex_hull, hull_minkowski_sum, minkowski_sum, sf_decompose
from dualgap.landscape import hitting_rate_experiment, landscape_experiment, teacher_synthetic_data
from dualgap.linear_net import (
    ProblemInstance,
    balanced_factorization,
    closed_form_global_product,
    gaussian_instance,
    primal_objective,
    random_factors,
    regularizer,
)
from dualgap.multibranch import (
    gap_sweep,
    make_branch,
    primal_inf_exhaustive,
    replicate,
    toy_dataset,
)
from oracles import brute_force_hull_vertices, spearman


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")


def lnn_instances():
    """Twenty Gaussian instances with n = d = 20, X = I, d_min in {2, 5, 10}, H in {2, 3}."""
    combos = list(itertools.product((2, 5, 10), (2, 3)))
    return [gaussian_instance(n=20, H=combos[k % 6][1], d_min=combos[k % 6][0], gamma_ratio=0.5, seed=k)
            for k in range(20)]


@pytest.fixture(scope="module")
def instances():
    return lnn_instances()


def test_criterion_1_strong_duality(instances, capsys):
    start = time.perf_counter()
    worst_gap, worst_dist = 0.0, 0.0
    ok = True
    for p in instances:
        assert p.X.shape == (20, 20) and p.Y.shape == (20, 20) and p.well_posed
        Z = closed_form_global_product(p)
        cert = closed_form_certificate(p)
        factors = balanced_factorization(Z, p)
        primal = primal_objective(factors, p)
        dual = dual_objective(cert, p)
        rel_gap = abs(primal - dual) / (1.0 + abs(primal))
        dist = np.linalg.norm(factors.product() @ p.X - mx.truncated_svd(p.Y_tilde - cert.lam, p.d_min))
        worst_gap, worst_dist = max(worst_gap, rel_gap), max(worst_dist, dist)
        ok &= rel_gap <= 1e-8 and dist <= 1e-8
    elapsed = time.perf_counter() - start
    ok &= elapsed < 10.0
    report(capsys, 1, ok, f"20 instances, max relative gap {worst_gap:.2e}, max l2 distance {worst_dist:.2e}, "
                          f"{elapsed:.2f}s")
    assert worst_gap <= 1e-8
    assert worst_dist <= 1e-8
    assert elapsed < 10.0


def test_criterion_2_iterative_dual(instances, capsys):
    worst, most_iters, monotone = 0.0, 0, True
    for p in instances:
        target = dual_objective(closed_form_certificate(p), p)
        it = solve_dual_projected_ascent(p, max_iters=5000, record_trace=True)
        worst = max(worst, abs(target - dual_objective(it, p)) / max(abs(target), 1e-300))
        most_iters = max(most_iters, it.meta["iterations"])
        monotone &= bool(np.all(np.diff(it.meta["trace"]) >= 0))
    ok = worst <= 1e-4 and most_iters <= 5000 and monotone
    report(capsys, 2, ok, f"max relative dual error {worst:.2e}, max iterations {most_iters}, "
                          f"monotone best-so-far trace {monotone}")
    assert ok


def test_criterion_3_variational_identity(capsys):
    rng = np.random.default_rng(2024)
    worst_rel = 0.0
    for k in range(50):
        H = int(rng.integers(2, 5))
        d0, dH = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        inner = [int(rng.integers(2, 6)) for _ in range(H - 1)]
        dims = (d0, *inner, dH)
        X = rng.normal(size=(d0, d0 + 3))
        r = int(rng.integers(1, min(inner) + 1))
        Z = rng.normal(size=(dH, r)) @ rng.normal(size=(r, d0)) @ X
        p = ProblemInstance(X, rng.normal(size=(dH, d0 + 3)), 0.1, dims)
        f = balanced_factorization(Z, p)
        nuc = mx.nuclear_norm(Z)
        worst_rel = max(worst_rel, abs(regularizer(f, X) - nuc) / nuc)
    worst_margin = np.inf
    for k in range(200):
        H = int(rng.integers(2, 5))
        dims = tuple(int(v) for v in rng.integers(2, 6, size=H + 1))
        X = rng.normal(size=(dims[0], dims[0] + 2))
        f = random_factors(dims, rng, scale=float(rng.uniform(0.3, 2.0)))
        worst_margin = min(worst_margin, regularizer(f, X) - mx.nuclear_norm(f.product() @ X))
    ok = worst_rel <= 1e-8 and worst_margin >= -1e-12
    report(capsys, 3, ok, f"balanced max relative error {worst_rel:.2e}, unbalanced min margin {worst_margin:.3e}")
    assert worst_rel <= 1e-8
    assert worst_margin >= -1e-12


def test_criterion_4_dual_conditions(instances, capsys):
    rng = np.random.default_rng(4)
    worst_residual, all_pass, all_fail_perturbed = 0.0, True, True
    for p in instances:
        Z = closed_form_global_product(p)
        cert = closed_form_certificate(p)
        rep = check_dual_conditions(Z, cert, p, tol=1e-8)
        worst_residual = max(worst_residual, rep.subgradient_residual, rep.projection_residual,
                             max(rep.stationarity_residuals))
        all_pass &= rep.pass_
        U, _, V = mx.svd(Z).skinny()
        M = rng.normal(size=Z.shape)
        T = U @ (U.T @ M) + (M @ V) @ V.T - U @ (U.T @ M @ V) @ V.T
        perturbed = make_certificate(cert.lam + 0.1 * p.gamma * T / np.linalg.norm(T), p)
        all_fail_perturbed &= not check_dual_conditions(Z, perturbed, p, tol=1e-8).pass_
    ok = all_pass and worst_residual <= 1e-8 and all_fail_perturbed
    report(capsys, 4, ok, f"certificates pass {all_pass} (max residual {worst_residual:.2e}), "
                          f"T-perturbed certificates rejected {all_fail_perturbed}")
    assert ok


FAMILIES = {
    "affine": 49,
    "relu": 49,
    "sigmoid": 49,
    "sinusoid": 41,
    "stack": 49,
}


def test_criterion_5_gap_bound(capsys):
    start = time.perf_counter()
    data = toy_dataset(12, seed=0, weighted=True)
    failures, dp_mismatch = [], []
    for kind, size in FAMILIES.items():
        branch = make_branch(kind, size)
        assert branch.size <= 50 and branch.param_dim <= 2
        for rep in gap_sweep(branch, data, [2, 4, 8, 16, 32]):
            lower = -rep.eps_grid <= rep.gap
            upper = rep.gap <= (2.0 / rep.I) * rep.delta_worst + rep.eps_grid
            if not (lower and upper and rep.assumption_tau_ok):
                failures.append((kind, rep.I, rep.gap, rep.bound, rep.eps_grid))
            if rep.I == 2:
                ex = primal_inf_exhaustive(replicate(branch, 2), data, rep.tau, rep.K)
                if ex.value != rep.inf_P:
                    dp_mismatch.append((kind, rep.inf_P, ex.value))
    elapsed = time.perf_counter() - start
    ok = not failures and not dp_mismatch and elapsed < 60.0
    report(capsys, 5, ok, f"{len(FAMILIES)} families x 5 widths, bound violations {failures}, "
                          f"DP/enumeration mismatches {dp_mismatch}, {elapsed:.1f}s")
    assert not failures
    assert not dp_mismatch
    assert elapsed < 60.0


def test_criterion_6_width_trend(capsys):
    data = toy_dataset(12, seed=0, weighted=True)
    I_values = [2, 4, 8, 16, 32]
    reps = gap_sweep(make_branch("sinusoid", 41), data, I_values)
    gaps = [r.gap for r in reps]
    eps = max(r.eps_grid for r in reps)
    rho_gap = spearman(I_values, gaps)
    gap_ok = rho_gap <= 0.0 and all(b <= a + eps for a, b in zip(gaps, gaps[1:]))

    teacher = teacher_synthetic_data(n=1000, d=10, hidden=11, seed=0)
    widths = [1, 3, 5, 100]
    metric = [landscape_experiment(I, teacher).violation for I in widths]
    land_ok = all(b <= a + 0.02 for a, b in zip(metric, metric[1:]))
    ok = gap_ok and land_ok
    report(capsys, 6, ok, f"gaps {np.round(gaps, 6).tolist()} (Spearman {rho_gap:.2f}); "
                          f"violation metric at I={widths}: {np.round(metric, 3).tolist()}")
    assert gap_ok
    assert land_ok


def test_criterion_7_hitting_rate(capsys):
    start = time.perf_counter()
    widths = list(range(10, 22))
    teacher = teacher_synthetic_data(n=1000, d=10, hidden=11, seed=0)
    rows = hitting_rate_experiment(widths, teacher, seeds=100, tol=1e-4, iters=20_000)
    rates = [r.rate for r in rows]
    rho = spearman(widths, rates)
    elapsed = time.perf_counter() - start
    ok = rates[-1] > rates[0] and rho > 0.5 and elapsed < 900.0
    report(capsys, 7, ok, f"hits per 100 seeds {[r.hits for r in rows]}, Spearman {rho:.2f}, {elapsed:.0f}s")
    assert rates[-1] > rates[0]
    assert rho > 0.5
    assert elapsed < 900.0


def test_criterion_8_geometry(capsys):
    rng = np.random.default_rng(8)
    hull_bad = 0
    for _ in range(100):
        P = rng.normal(size=(1000, 2))
        if set(convex_hull(P).index.tolist()) != brute_force_hull_vertices(P):
            hull_bad += 1

    sf_bad, worst_residual = 0, 0.0
    for _ in range(100):
        I = int(rng.integers(2, 40))
        sets = [rng.normal(size=(int(rng.integers(1, 10)), 2)) for _ in range(I)]
        walk = hull_minkowski_sum(sets).vertices
        y = rng.dirichlet(np.ones(len(walk))) @ walk
        d = sf_decompose(y, sets)
        res = float(np.linalg.norm(d.reconstruct(sets) - y))
        worst_residual = max(worst_residual, res)
        if len(d.convexified) > 2 or res > 1e-9:
            sf_bad += 1

    sum_bad = 0
    for _ in range(50):
        A = rng.normal(size=(int(rng.integers(1, 40)), 2))
        B = rng.normal(size=(int(rng.integers(1, 40)), 2))
        lhs = convex_hull(minkowski_sum([A, B])).vertices
        rhs = hull_minkowski_sum([convex_hull(A), convex_hull(B)]).vertices
        if lhs.shape != rhs.shape or np.max(np.abs(lhs - rhs)) > 1e-9:
            sum_bad += 1
    ok = hull_bad == 0 and sf_bad == 0 and sum_bad == 0
    report(capsys, 8, ok, f"hull mismatches {hull_bad}/100, SF failures {sf_bad}/100 "
                          f"(max residual {worst_residual:.1e}), conv(A+B) mismatches {sum_bad}/50")
    assert ok
