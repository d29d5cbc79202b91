"""Schatten-regularized deep linear networks: the primal problem.

The objective over factors ``W_1 .. W_H`` is::

    1/2 ||Y - W_H ... W_1 X||_F^2
        + gamma/H * (||W_1 X||_{S_H}^H + sum_{i>=2} ||W_i||_{S_H}^H)

and it shares its optimal value with the nuclear-norm problem in the
product ``Z = W_H ... W_1 X`` restricted to rank ``<= d_min``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import matrix as mx
from .errors import ArgumentError, HypothesisViolation, InfeasibleError


@dataclass(frozen=True)
class LinearNetFactors:
    """Ordered layer weights ``W_1, ..., W_H``; ``W_i`` has shape ``(d_i, d_{i-1})``."""

    factors: tuple

    def __post_init__(self):
        fs = tuple(mx.as_matrix(W, f"W_{i + 1}") for i, W in enumerate(self.factors))
        if len(fs) < 2:
            raise ArgumentError("a deep linear network needs H >= 2 layers")
        for i in range(1, len(fs)):
            if fs[i].shape[1] != fs[i - 1].shape[0]:
                raise ArgumentError(
                    f"W_{i + 1} has {fs[i].shape[1]} columns but W_{i} has {fs[i - 1].shape[0]} rows"
                )
        object.__setattr__(self, "factors", fs)

    @property
    def H(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple:
        return (self.factors[0].shape[1],) + tuple(W.shape[0] for W in self.factors)

    def product(self) -> np.ndarray:
        """``W_H ... W_1``."""
        P = self.factors[0]
        for W in self.factors[1:]:
            P = W @ P
        return P

    def to_list(self) -> list:
        return [mx.matrix_to_dict(W) for W in self.factors]

    @classmethod
    def from_list(cls, obj) -> "LinearNetFactors":
        return cls(tuple(mx.matrix_from_obj(o) for o in obj))


@dataclass(frozen=True)
class ProblemInstance:
    """Data ``X`` (d_0 x n), labels ``Y`` (d_H x n), weight ``gamma`` and layer widths."""

    X: np.ndarray
    Y: np.ndarray
    gamma: float
    dims: tuple

    def __post_init__(self):
        X = mx.as_matrix(self.X, "X")
        Y = mx.as_matrix(self.Y, "Y")
        dims = tuple(int(d) for d in self.dims)
        if X.shape[1] != Y.shape[1]:
            raise ArgumentError(f"X has {X.shape[1]} samples, Y has {Y.shape[1]}")
        if len(dims) < 3:
            raise ArgumentError("dims must list d_0, ..., d_H with H >= 2")
        if dims[0] != X.shape[0] or dims[-1] != Y.shape[0]:
            raise ArgumentError(f"dims {dims} inconsistent with X {X.shape} and Y {Y.shape}")
        if min(dims) < 1:
            raise ArgumentError("layer widths must be positive")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ArgumentError("gamma must be finite and non-negative")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def H(self) -> int:
        return len(self.dims) - 1

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d_min(self) -> int:
        return min(self.dims[1:-1])

    @cached_property
    def X_pinv(self) -> np.ndarray:
        return mx.pseudo_inverse(self.X)

    @cached_property
    def Y_tilde(self) -> np.ndarray:
        """``Y X^+ X``: the labels projected onto the row space of ``X``."""
        return mx.row_space_project(self.Y, self.X)

    @cached_property
    def sigma_min(self) -> float:
        return mx.sigma_min_nonzero(self.Y_tilde)

    @property
    def gamma_ok(self) -> bool:
        return self.gamma < self.sigma_min

    @property
    def dims_ok(self) -> bool:
        return self.d_min <= min(self.dims[0], self.dims[-1], self.n)

    @property
    def well_posed(self) -> bool:
        """Both hypotheses of the strong-duality theorem hold."""
        return self.gamma_ok and self.dims_ok

    def with_gamma(self, gamma) -> "ProblemInstance":
        return ProblemInstance(self.X, self.Y, gamma, self.dims)

    def to_dict(self) -> dict:
        return {
            "X": mx.matrix_to_dict(self.X),
            "Y": mx.matrix_to_dict(self.Y),
            "gamma": self.gamma,
            "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, obj) -> "ProblemInstance":
        for key in ("X", "Y", "gamma", "dims"):
            if key not in obj:
                raise ArgumentError(f"instance is missing '{key}'")
        return cls(mx.matrix_from_obj(obj["X"]), mx.matrix_from_obj(obj["Y"]), float(obj["gamma"]), tuple(obj["dims"]))


def _check_factors(f: LinearNetFactors, p: ProblemInstance):
    if f.dims != p.dims:
        raise ArgumentError(f"factor widths {f.dims} do not match instance widths {p.dims}")


def schatten_power(M, H) -> float:
    """``||M||_{S_H}^H``."""
    return float(np.sum(mx.singular_values(M) ** H))


def regularizer(f: LinearNetFactors, X) -> float:
    """``(1/H) [||W_1 X||_{S_H}^H + sum_{i>=2} ||W_i||_{S_H}^H]``."""
    H = f.H
    total = schatten_power(f.factors[0] @ X, H)
    total += sum(schatten_power(W, H) for W in f.factors[1:])
    return total / H


def primal_objective(f: LinearNetFactors, p: ProblemInstance) -> float:
    _check_factors(f, p)
    R = p.Y - f.product() @ p.X
    return 0.5 * float(np.sum(R * R)) + p.gamma * regularizer(f, p.X)


def nuclear_objective(Z, p: ProblemInstance) -> float:
    """``1/2 ||Y - Z||_F^2 + gamma ||Z||_*``."""
    Z = mx.as_matrix(Z, "Z")
    if Z.shape != p.Y.shape:
        raise ArgumentError(f"Z has shape {Z.shape}, expected {p.Y.shape}")
    R = p.Y - Z
    return 0.5 * float(np.sum(R * R)) + p.gamma * mx.nuclear_norm(Z)


def balanced_factorization(Z, p: ProblemInstance, tol=1e-9) -> LinearNetFactors:
    """Split ``Z = U S V^T`` evenly across the layers.

    Every layer carries ``S^(1/H)`` (zero-padded to its shape); the outer
    layers absorb ``U`` and ``V^T X^+``. This attains equality in the
    Hoelder/AM-GM chain, so the returned regularizer equals ``||Z||_*``.

    Raises
    ------
    InfeasibleError
        If ``rank(Z) > d_min`` or the rows of ``Z`` leave ``Row(X)``.
    """
    Z = mx.as_matrix(Z, "Z")
    if Z.shape != p.Y.shape:
        raise ArgumentError(f"Z has shape {Z.shape}, expected {p.Y.shape}")
    res = mx.svd(Z)
    U, s, V = res.skinny()
    r = res.rank
    if r > p.d_min:
        raise InfeasibleError(f"rank(Z)={r} exceeds d_min={p.d_min}")
    drift = np.linalg.norm(Z - mx.row_space_project(Z, p.X))
    if drift > tol * (1.0 + np.linalg.norm(Z)):
        raise InfeasibleError(f"Row(Z) is not contained in Row(X) (residual {drift:.3e})")

    dims, H = p.dims, p.H
    root = s ** (1.0 / H)
    Ws = []
    for i in range(1, H + 1):
        W = np.zeros((dims[i], dims[i - 1]))
        if i == 1:
            W[:r, :] = (root[:, None] * V.T) @ p.X_pinv
        elif i == H:
            W[:, :r] = U * root
        else:
            W[np.arange(r), np.arange(r)] = root
        Ws.append(W)
    return LinearNetFactors(tuple(Ws))


def closed_form_global_product(p: ProblemInstance) -> np.ndarray:
    """Optimal product ``W_H ... W_1 X``: shrink the top ``min(rank, d_min)``
    singular values of ``Y_tilde`` by ``gamma`` and drop the rest.

    Refuses (``HypothesisViolation``) outside the well-posed regime.
    """
    _require_well_posed(p)
    U, s, V, r = mx.svd(p.Y_tilde)
    rbar = min(r, p.d_min)
    shrunk = np.maximum(s[:rbar] - p.gamma, 0.0)
    return (U[:, :rbar] * shrunk) @ V[:, :rbar].T


def _require_well_posed(p: ProblemInstance):
    if not p.gamma_ok:
        raise HypothesisViolation(
            f"gamma={p.gamma:.6g} is not below sigma_min(Y_tilde)={p.sigma_min:.6g}"
        )
    if not p.dims_ok:
        raise HypothesisViolation(
            f"d_min={p.d_min} exceeds min(d_0, d_H, n)={min(p.dims[0], p.dims[-1], p.n)}"
        )


# -- local search ------------------------------------------------------------

def _schatten_grad(M, H):
    """Gradient of ``(1/H) ||M||_{S_H}^H``: ``U diag(s^(H-1)) V^T`` (zero where s = 0)."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return (U * s ** (H - 1)) @ Vt


def primal_gradient(f: LinearNetFactors, p: ProblemInstance) -> list:
    """Hand-derived gradient of :func:`primal_objective` for every factor."""
    Ws = f.factors
    H = len(Ws)
    # prefix[i] = W_i ... W_1 X  (prefix[0] = X)
    prefix = [p.X]
    for W in Ws:
        prefix.append(W @ prefix[-1])
    # suffix[i] = W_H ... W_{i+1}  (suffix[H] = I)
    suffix = [None] * (H + 1)
    suffix[H] = np.eye(Ws[-1].shape[0])
    for i in range(H - 1, -1, -1):
        suffix[i] = suffix[i + 1] @ Ws[i]
    R = prefix[-1] - p.Y
    grads = []
    for i in range(H):
        G = suffix[i + 1].T @ R @ prefix[i].T
        if i == 0:
            G = G + p.gamma * _schatten_grad(prefix[1], H) @ p.X.T
        else:
            G = G + p.gamma * _schatten_grad(Ws[i], H)
        grads.append(G)
    return grads


@dataclass
class LocalSearchRun:
    """Outcome of one gradient-descent run; ``failed`` marks divergence."""

    factors: LinearNetFactors
    objective: float
    initial_objective: float
    steps: int
    failed: bool = False
    seed: int | None = None


def primal_local_search(init: LinearNetFactors, p: ProblemInstance, steps=5000, lr=1e-2,
                        grad_tol=1e-12) -> LocalSearchRun:
    """Gradient descent on the primal objective.

    A step that raises the objective is retried with half the step size, so
    the returned objective never exceeds the initial one. A non-finite
    objective marks the run as failed and the best iterate seen is kept.
    """
    _check_factors(init, p)
    if lr < 0:
        raise ArgumentError("learning rate must be non-negative")
    cur = init
    cur_obj = f0 = primal_objective(init, p)
    eta = float(lr)
    failed = False
    t = 0
    if eta > 0:
        for t in range(1, steps + 1):
            grads = primal_gradient(cur, p)
            gnorm = np.sqrt(sum(float(np.sum(G * G)) for G in grads))
            if not np.isfinite(gnorm):
                failed = True
                break
            if gnorm <= grad_tol:
                break
            while True:
                cand = LinearNetFactors(tuple(W - eta * G for W, G in zip(cur.factors, grads)))
                with np.errstate(over="ignore", invalid="ignore"):
                    try:
                        obj = primal_objective(cand, p)
                    except ArgumentError:  # non-finite entries
                        obj = np.inf
                if obj <= cur_obj:
                    break
                eta *= 0.5
                if eta < 1e-300:
                    break
            if not obj <= cur_obj:
                failed = not np.isfinite(obj)
                break
            cur, cur_obj = cand, obj
            eta = min(float(lr), 1.5 * eta)
    return LocalSearchRun(cur, cur_obj, f0, t, failed)


def random_factors(dims, rng, scale=None) -> LinearNetFactors:
    """Entries uniform on ``[-s, s]`` with ``s = 1/sqrt(max width)`` by default."""
    s = 1.0 / np.sqrt(max(dims)) if scale is None else scale
    return LinearNetFactors(tuple(rng.uniform(-s, s, size=(dims[i], dims[i - 1])) for i in range(1, len(dims))))


def primal_multistart(p: ProblemInstance, restarts=10, steps=5000, lr=1e-2, seed=0) -> LocalSearchRun:
    """Best of ``restarts`` local searches; ties go to the lowest restart index."""
    best = None
    for k in range(restarts):
        rng = np.random.default_rng([seed, k])
        run = primal_local_search(random_factors(p.dims, rng), p, steps=steps, lr=lr)
        run.seed = k
        if run.failed:
            continue
        if best is None or run.objective < best.objective:
            best = run
    return best


def gaussian_instance(n=20, d0=None, dH=None, H=3, d_min=10, gamma_ratio=0.5, seed=0,
                      x="identity") -> ProblemInstance:
    """Gaussian labels with ``H - 1`` hidden layers of width ``d_min``.

    ``x="identity"`` needs ``d0 == n``; ``x="gaussian"`` draws X as well.
    ``gamma`` is ``gamma_ratio * sigma_min(Y_tilde)``.
    """
    d0 = n if d0 is None else int(d0)
    dH = n if dH is None else int(dH)
    if H < 2:
        raise ArgumentError("H must be at least 2")
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(dH, n))
    if x == "identity":
        if d0 != n:
            raise ArgumentError(f"identity X needs d0 == n, got d0={d0}, n={n}")
        X = np.eye(n)
    elif x == "gaussian":
        X = rng.normal(size=(d0, n))
    else:
        raise ArgumentError(f"unknown X kind {x!r}; choose 'identity' or 'gaussian'")
    dims = (d0,) + (int(d_min),) * (H - 1) + (dH,)
    p = ProblemInstance(X, Y, 0.0, dims)
    return p.with_gamma(gamma_ratio * p.sigma_min)
