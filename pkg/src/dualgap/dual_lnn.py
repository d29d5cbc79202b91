"""Convex dual of the regularized deep linear network.

The dual variable ``Lambda`` lives in the spectral ball ``||Lambda|| <= gamma``
with rows in ``Row(X)``; its objective is::

    -1/2 ||Y_tilde - Lambda||_{d_min}^2 + 1/2 ||Y||_F^2

where ``||.||_{d_min}^2`` sums the top ``d_min`` squared singular values.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import matrix as mx
from .errors import ArgumentError, DualGapError, HypothesisViolation
from .linear_net import (
    LinearNetFactors,
    ProblemInstance,
    _require_well_posed,
    balanced_factorization,
    closed_form_global_product,
    nuclear_objective,
    primal_multistart,
    primal_objective,
)

FEAS_TOL = 1e-10


@dataclass
class DualCertificate:
    """A dual matrix with its feasibility record.

    ``meta`` carries solver bookkeeping (iteration count, convergence flag,
    best-so-far trace) when the certificate comes from an iterative solve.
    """

    lam: np.ndarray
    gamma: float
    spectral_ok: bool
    row_space_residual: float
    meta: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.spectral_ok and self.row_space_residual <= FEAS_TOL * (1.0 + np.linalg.norm(self.lam))


def make_certificate(lam, p: ProblemInstance, meta=None) -> DualCertificate:
    lam = mx.as_matrix(lam, "Lambda")
    if lam.shape != p.Y.shape:
        raise ArgumentError(f"Lambda has shape {lam.shape}, expected {p.Y.shape}")
    spectral_ok = mx.spectral_norm(lam) <= p.gamma + FEAS_TOL
    resid = float(np.linalg.norm(lam - mx.row_space_project(lam, p.X)))
    return DualCertificate(lam, p.gamma, bool(spectral_ok), resid, dict(meta or {}))


def _effective_dmin(p: ProblemInstance) -> int:
    return min(p.d_min, *p.Y.shape)


def dual_objective(c: DualCertificate, p: ProblemInstance) -> float:
    """Dual value; ``-inf`` outside the spectral ball (the conjugate term is infinite there)."""
    if c.lam.shape != p.Y.shape:
        raise ArgumentError(f"Lambda has shape {c.lam.shape}, expected {p.Y.shape}")
    if not c.spectral_ok:
        return -np.inf
    return _dual_value(c.lam, p)


def _dual_value(lam, p):
    return -0.5 * mx.dmin_norm_sq(p.Y_tilde - lam, _effective_dmin(p)) + 0.5 * float(np.sum(p.Y * p.Y))


def closed_form_certificate(p: ProblemInstance) -> DualCertificate:
    """``gamma * U V^T`` over all non-zero singular pairs of ``Y_tilde``.

    The first ``min(rank, d_min)`` pairs give the component in the tangent
    space of the optimal product; the remaining ones form the orthogonal
    part, whose spectral norm is exactly ``gamma``.
    """
    _require_well_posed(p)
    U, _, V = mx.svd(p.Y_tilde).skinny()
    return make_certificate(p.gamma * (U @ V.T), p)


# -- optimality conditions ---------------------------------------------------

@dataclass
class DualConditionsReport:
    subgradient_residual: float
    projection_residual: float
    spectral_margin: float
    stationarity_residuals: list
    tol: float
    pass_: bool

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("pass_")
        return d


def _tangent_parts(M, U, V):
    """Split ``M`` into its parts in ``T = {U A^T + B V^T}`` and ``T^perp``."""
    PU = U @ (U.T @ M)
    MPV = (M @ V) @ V.T
    perp = M - PU - MPV + U @ (U.T @ M @ V) @ V.T
    return M - perp, perp


def stationarity_residuals(f: LinearNetFactors, lam, p: ProblemInstance) -> list:
    """Norms of ``(W_H..W_{i+1})^T (W_H..W_1 X + Lambda - Y_tilde) X^T (W_{i-1}..W_1)^T`` for each layer.

    These vanish exactly when every factor is a stationary point of the
    Lagrangian with the dual variable held at ``Lambda``.
    """
    Ws = f.factors
    H = len(Ws)
    E = f.product() @ p.X + lam - p.Y_tilde
    out = []
    for i in range(H):
        left = np.eye(Ws[-1].shape[0])
        for W in reversed(Ws[i + 1:]):
            left = left @ W
        right = p.X
        for W in Ws[:i]:
            right = W @ right
        out.append(float(np.linalg.norm(left.T @ E @ right.T)))
    return out


def check_dual_conditions(Z_star, c: DualCertificate, p: ProblemInstance, tol=1e-8) -> DualConditionsReport:
    """Certify the pair ``(Z_star, Lambda)`` via the three sufficient conditions.

    1. ``Lambda`` is a subgradient of ``gamma ||.||_*`` at ``Z_star`` and lies
       in ``Row(X)``: its ``T`` part equals ``gamma U V^T`` and its ``T^perp``
       part has spectral norm at most ``gamma``.
    2. ``P_T(Y_tilde - Lambda) = Z_star``.
    3. ``||P_{T^perp}(Y_tilde - Lambda)|| <= sigma_{d_min}(Z_star)``.

    The stationarity residuals are evaluated at the balanced factors of
    ``Z_star``; a ``Z_star`` that cannot be factored yields ``inf`` there.
    Residuals are absolute Frobenius/spectral norms.
    """
    Z = mx.as_matrix(Z_star, "Z_star")
    lam = c.lam
    U, s, V = mx.svd(Z).skinny()
    T_part, perp_part = _tangent_parts(lam, U, V)
    sub = max(
        float(np.linalg.norm(T_part - p.gamma * (U @ V.T))),
        max(0.0, mx.spectral_norm(perp_part) - p.gamma),
        c.row_space_residual,
    )
    D = p.Y_tilde - lam
    D_T, D_perp = _tangent_parts(D, U, V)
    proj = float(np.linalg.norm(D_T - Z))
    dmin = p.d_min
    sig_d = float(s[dmin - 1]) if dmin <= s.size else 0.0
    margin = sig_d - mx.spectral_norm(D_perp)
    try:
        factors = balanced_factorization(Z, p)
        stat = stationarity_residuals(factors, lam, p)
    except DualGapError:
        stat = [float("inf")] * p.H
    ok = sub <= tol and proj <= tol and margin >= -tol and all(r <= tol for r in stat)
    return DualConditionsReport(sub, proj, margin, stat, tol, bool(ok))


# -- iterative solver --------------------------------------------------------

def solve_dual_projected_ascent(p: ProblemInstance, max_iters=5000, tol=1e-12, step0=1.0,
                                patience=50, record_trace=False) -> DualCertificate:
    """Projected supergradient ascent on the dual.

    ``Lambda_{t+1} = clip(Lambda_t + eta_t * svd_{d_min}(Y_tilde - Lambda_t), gamma)``
    with ``eta_t = step0 / sqrt(t)`` and ``Lambda_0 = 0``. Both the step and
    the clip keep the iterate in ``Row(X)``; a drift check every 100
    iterations re-projects if rounding accumulates. Stops after ``patience``
    consecutive iterations improving the best value by less than ``tol``.
    The best iterate is returned.
    """
    if p.gamma < 0:
        raise ArgumentError("gamma must be non-negative")
    d = _effective_dmin(p)
    lam = np.zeros_like(p.Y_tilde)
    best_val = _dual_value(lam, p)
    best = lam
    trace = [best_val]
    meta = {"iterations": 0, "converged": True}
    if p.gamma == 0.0:
        if record_trace:
            meta["trace"] = trace
        return make_certificate(lam, p, meta)

    stall = 0
    t = 0
    converged = False
    for t in range(1, max_iters + 1):
        step = mx.truncated_svd(p.Y_tilde - lam, d)
        lam = mx.spectral_ball_project(lam + (step0 / np.sqrt(t)) * step, p.gamma)
        if t % 100 == 0:
            drift = np.linalg.norm(lam - mx.row_space_project(lam, p.X))
            if drift > FEAS_TOL * (1.0 + np.linalg.norm(lam)):
                lam = mx.spectral_ball_project(mx.row_space_project(lam, p.X), p.gamma)
        val = _dual_value(lam, p)
        if val > best_val + tol:
            stall = 0
        else:
            stall += 1
        if val > best_val:
            best_val, best = val, lam
        trace.append(best_val)
        if stall >= patience:
            converged = True
            break
    meta = {"iterations": t, "converged": converged}
    if record_trace:
        meta["trace"] = trace
    return make_certificate(best, p, meta)


def recover_primal_from_dual(c: DualCertificate, p: ProblemInstance) -> LinearNetFactors:
    """Balanced factors of ``svd_{d_min}(Y_tilde - Lambda)``."""
    Z = mx.truncated_svd(p.Y_tilde - c.lam, _effective_dmin(p))
    return balanced_factorization(Z, p)


# -- reporting ---------------------------------------------------------------

@dataclass
class GapReportLNN:
    """Primal/dual optima of one instance, from closed forms and from solvers."""

    n: int
    d0: int
    dH: int
    H: int
    d_min: int
    gamma: float
    sigma_min: float
    hypothesis_ok: bool
    primal_closed: float = float("nan")
    dual_closed: float = float("nan")
    gap_closed: float = float("nan")
    nuclear_closed: float = float("nan")
    l2_distance: float = float("nan")
    dual_iterative: float = float("nan")
    dual_iterations: int = 0
    gap_iterative: float = float("nan")
    l2_distance_iterative: float = float("nan")
    primal_local: float = float("nan")
    local_restarts: int = 0
    conditions_pass: bool = False
    message: str = ""

    def strong_duality_ok(self, rtol=1e-8) -> bool:
        """Closed-form gap and factor distance both within ``rtol`` (gap relative to the optimum)."""
        if not self.hypothesis_ok:
            return False
        return bool(abs(self.gap_closed) <= rtol * (1.0 + abs(self.primal_closed))
                    and self.l2_distance <= rtol)

    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @staticmethod
    def csv_header() -> list:
        return list(GapReportLNN.__dataclass_fields__)

    def csv_row(self) -> list:
        return [_csv_value(getattr(self, k)) for k in self.csv_header()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def _jsonable(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _csv_value(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return format(v, ".17g")
    return v


def duality_gap_report(p: ProblemInstance, restarts=0, local_steps=3000, local_lr=1e-2,
                       dual_max_iters=5000, dual_tol=1e-12, cond_tol=1e-8, seed=0) -> GapReportLNN:
    """Compare primal and dual optima of one instance.

    Closed-form primal/dual values and the distance between the primal
    product and ``svd_{d_min}(Y_tilde - Lambda*)`` are always computed on a
    well-posed instance; the iterative dual solve runs when
    ``dual_max_iters > 0`` and the multi-start primal search when
    ``restarts > 0``. Hypothesis violations are recorded, not raised.
    """
    rep = GapReportLNN(
        n=p.n, d0=p.dims[0], dH=p.dims[-1], H=p.H, d_min=p.d_min, gamma=p.gamma,
        sigma_min=float(p.sigma_min), hypothesis_ok=p.well_posed,
    )
    try:
        Z = closed_form_global_product(p)
        cert = closed_form_certificate(p)
    except HypothesisViolation as exc:
        rep.message = str(exc)
        return rep
    factors = balanced_factorization(Z, p)
    rep.primal_closed = primal_objective(factors, p)
    rep.dual_closed = dual_objective(cert, p)
    rep.gap_closed = rep.primal_closed - rep.dual_closed
    d = _effective_dmin(p)
    Z_fac = factors.product() @ p.X
    rep.l2_distance = float(np.linalg.norm(Z_fac - mx.truncated_svd(p.Y_tilde - cert.lam, d)))
    rep.conditions_pass = check_dual_conditions(Z, cert, p, cond_tol).pass_
    if dual_max_iters > 0:
        it = solve_dual_projected_ascent(p, max_iters=dual_max_iters, tol=dual_tol)
        rep.dual_iterative = dual_objective(it, p)
        rep.dual_iterations = it.meta["iterations"]
        rep.gap_iterative = rep.primal_closed - rep.dual_iterative
        rep.l2_distance_iterative = float(np.linalg.norm(Z_fac - mx.truncated_svd(p.Y_tilde - it.lam, d)))
    if restarts > 0:
        run = primal_multistart(p, restarts=restarts, steps=local_steps, lr=local_lr, seed=seed)
        if run is not None:
            rep.primal_local = run.objective
            rep.local_restarts = restarts
    rep.nuclear_closed = nuclear_objective(Z, p)
    return rep
