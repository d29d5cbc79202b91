"""Duality gap of gridded multi-branch networks under the tau-hinge loss.

Each branch ``i`` owns a finite parameter grid. Under the margin assumption
(``tau`` above every achievable margin) the hinge is affine, the risk of
the averaged network ``f = (1/I) sum_i f_i`` splits into per-branch risks

    g_i(w) = 1 - E[y f_i(w; x)] / tau,

and the primal and dual problems become

    inf P = min (1/I) sum_i g_i(w_i)   s.t.  (1/I) sum_i h_i(w_i) <= K,
    sup D = max_{lam >= 0} Q(lam) - lam K,
    Q(lam) = (1/I) sum_i min_w [g_i(w) + lam h_i(w)].

Both are solved exactly on the grids: the primal by a Pareto-frontier
dynamic program over (budget, risk) pairs, the dual by scanning the
breakpoints of the concave piecewise-linear dual function.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from math import prod

import numpy as np

from .errors import ArgumentError, InfeasibleError
from .geometry import ConvexEnvelope, convex_hull, epigraph_inf

ENUMERATION_CAP = 10_000_000
FRONTIER_CAP = 200_000
FP_SLACK = 1e-12


# -- branches ----------------------------------------------------------------

def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_FEATURES = {
    # name: (param_dim, f(W, x) with W of shape (G, p) and x of shape (N,)) -> (G, N)
    "affine": (2, lambda W, x: W[:, :1] * x + W[:, 1:2]),
    "relu": (2, lambda W, x: W[:, :1] * _relu(W[:, 1:2] * x)),
    "sigmoid": (2, lambda W, x: W[:, :1] * _sigmoid(W[:, 1:2] * x)),
    "tanh": (2, lambda W, x: W[:, :1] * np.tanh(W[:, 1:2] * x)),
    "sinusoid": (1, lambda W, x: np.sin(3.0 * W[:, :1]) * x),
    "stack": (2, lambda W, x: np.tanh(W[:, :1] * _relu(W[:, 1:2] * x))),
}

_DEFAULT_BOXES = {
    "affine": ([-1.0, -1.0], [1.0, 1.0]),
    "relu": ([-1.0, -1.0], [1.0, 1.0]),
    "sigmoid": ([-1.0, -4.0], [1.0, 4.0]),
    "tanh": ([-1.0, -4.0], [1.0, 4.0]),
    "sinusoid": ([-np.pi], [np.pi]),
    "stack": ([-2.0, -2.0], [2.0, 2.0]),
}

_REGULARIZERS = {
    "sq": lambda W: np.sum(W * W, axis=1),
    "norm": lambda W: np.sqrt(np.sum(W * W, axis=1)),
}

BRANCH_KINDS = tuple(_FEATURES)


def _grid(lo, hi, size):
    """Uniform grid with ``size`` points in 1-D or about ``size`` points (a square) in 2-D."""
    if len(lo) == 1:
        return np.linspace(lo[0], hi[0], size)[:, None]
    side = max(1, int(np.floor(np.sqrt(size))))
    a = np.linspace(lo[0], hi[0], side)
    b = np.linspace(lo[1], hi[1], side)
    A, B = np.meshgrid(a, b, indexing="ij")
    return np.column_stack([A.ravel(), B.ravel()])


@dataclass(frozen=True)
class BranchSpec:
    """One gridded branch: features ``f_i(w; x)``, convex regularizer ``h_i(w)``, box, grid."""

    kind: str
    grid: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    regularizer: str = "sq"
    feature_fn: object = field(default=None, repr=False, compare=False)
    regularizer_fn: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        G = np.asarray(self.grid, dtype=np.float64)
        if G.ndim == 1:
            G = G[:, None]
        lo = np.asarray(self.lo, dtype=np.float64).ravel()
        hi = np.asarray(self.hi, dtype=np.float64).ravel()
        if G.shape[0] == 0:
            raise ArgumentError("branch grid is empty")
        if G.shape[1] not in (1, 2):
            raise ArgumentError(f"parameter dimension {G.shape[1]} unsupported (only 1 or 2)")
        if lo.shape != (G.shape[1],) or hi.shape != (G.shape[1],) or np.any(lo > hi):
            raise ArgumentError("box bounds must match the parameter dimension with lo <= hi")
        if np.any(G < lo - 1e-12) or np.any(G > hi + 1e-12):
            raise ArgumentError("grid points lie outside the parameter box")
        if self.feature_fn is None:
            if self.kind not in _FEATURES:
                raise ArgumentError(f"unknown branch kind {self.kind!r}; choose from {sorted(_FEATURES)}")
            p, fn = _FEATURES[self.kind]
            if p != G.shape[1]:
                raise ArgumentError(f"branch kind {self.kind!r} needs {p} parameters, grid has {G.shape[1]}")
            object.__setattr__(self, "feature_fn", fn)
        if self.regularizer_fn is None:
            if self.regularizer not in _REGULARIZERS:
                raise ArgumentError(f"unknown regularizer {self.regularizer!r}; choose from {sorted(_REGULARIZERS)}")
            object.__setattr__(self, "regularizer_fn", _REGULARIZERS[self.regularizer])
        object.__setattr__(self, "grid", G)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        self._check_convex_regularizer()

    def _check_convex_regularizer(self, trials=256):
        rng = np.random.default_rng(12345)
        A = self.lo + (self.hi - self.lo) * rng.random((trials, self.param_dim))
        B = self.lo + (self.hi - self.lo) * rng.random((trials, self.param_dim))
        hA, hB = self.regularizer_fn(A), self.regularizer_fn(B)
        hM = self.regularizer_fn(0.5 * (A + B))
        slack = 1e-12 * (1.0 + np.abs(hA) + np.abs(hB))
        if np.any(hM > 0.5 * (hA + hB) + slack):
            raise ArgumentError(f"regularizer of branch {self.kind!r} fails the midpoint convexity check")

    @property
    def param_dim(self) -> int:
        return self.grid.shape[1]

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    def features(self, x, params=None) -> np.ndarray:
        """``f_i(w; x)`` for every grid point (or the given params) and sample: shape (G, N)."""
        W = self.grid if params is None else np.atleast_2d(np.asarray(params, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64)
        x = x[:, 0] if x.ndim == 2 else x
        return np.asarray(self.feature_fn(W, x), dtype=np.float64)

    def h(self, params=None) -> np.ndarray:
        W = self.grid if params is None else np.atleast_2d(np.asarray(params, dtype=np.float64))
        return np.asarray(self.regularizer_fn(W), dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "type": self.kind,
            "grid_size": self.size,
            "box": [self.lo.tolist(), self.hi.tolist()],
            "regularizer": self.regularizer,
        }


def make_branch(kind, grid_size=41, box=None, regularizer="sq") -> BranchSpec:
    """Built-in branch on a uniform grid (2-D kinds use a square grid of about ``grid_size`` points)."""
    if kind not in _FEATURES:
        raise ArgumentError(f"unknown branch kind {kind!r}; choose from {sorted(_FEATURES)}")
    if grid_size < 1:
        raise ArgumentError("grid_size must be positive")
    lo, hi = _DEFAULT_BOXES[kind] if box is None else box
    lo, hi = np.asarray(lo, dtype=np.float64).ravel(), np.asarray(hi, dtype=np.float64).ravel()
    return BranchSpec(kind, _grid(lo, hi, grid_size), lo, hi, regularizer)


def branch_from_dict(obj) -> BranchSpec:
    unknown = set(obj) - {"type", "grid_size", "box", "regularizer", "grid"}
    if unknown:
        raise ArgumentError(f"unknown branch key(s): {sorted(unknown)}")
    if "type" not in obj:
        raise ArgumentError("branch entry needs a 'type'")
    if "grid" in obj:
        G = np.asarray(obj["grid"], dtype=np.float64)
        G = G[:, None] if G.ndim == 1 else G
        lo, hi = obj.get("box", (G.min(axis=0), G.max(axis=0)))
        return BranchSpec(obj["type"], G, lo, hi, obj.get("regularizer", "sq"))
    return make_branch(obj["type"], int(obj.get("grid_size", 41)), obj.get("box"), obj.get("regularizer", "sq"))


# -- data --------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Weighted samples ``(x, y, weight)`` with labels in {-1, +1} and weights summing to one."""

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        x = x[:, None] if x.ndim == 1 else x
        y = np.asarray(self.y, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if x.shape[0] == 0 or x.shape[0] != y.size or y.size != w.size:
            raise ArgumentError("x, y and weights must be non-empty with matching lengths")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ArgumentError("labels must be -1 or +1")
        if np.any(w < 0) or abs(np.sum(w) - 1.0) > 1e-12:
            raise ArgumentError("weights must be non-negative and sum to 1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise ArgumentError("dataset has non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.y.size

    @classmethod
    def uniform(cls, x, y):
        n = len(np.asarray(y))
        return cls(x, y, np.full(n, 1.0 / n))

    def to_dict(self):
        return {"x": self.x.tolist(), "y": self.y.tolist(), "weights": self.weights.tolist()}


def toy_dataset(n=12, seed=0, weighted=True) -> Dataset:
    """1-D inputs with noisy threshold labels; Dirichlet weights when ``weighted``."""
    if not 1 <= n <= 10_000:
        raise ArgumentError("n must be between 1 and 10000")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = np.where(x + 0.5 * rng.normal(size=n) > 0.2, 1.0, -1.0)
    if weighted:
        w = rng.dirichlet(np.ones(n))
        w /= w.sum()
    else:
        w = np.full(n, 1.0 / n)
    return Dataset(x, y, w)


def dataset_from_dict(obj) -> Dataset:
    if "synthetic" in obj:
        opts = dict(obj["synthetic"])
        unknown = set(opts) - {"n", "seed", "weighted"}
        if unknown:
            raise ArgumentError(f"unknown dataset key(s): {sorted(unknown)}")
        return toy_dataset(**opts)
    unknown = set(obj) - {"x", "y", "weights"}
    if unknown:
        raise ArgumentError(f"unknown dataset key(s): {sorted(unknown)}")
    if "weights" in obj:
        return Dataset(obj["x"], obj["y"], obj["weights"])
    return Dataset.uniform(obj["x"], obj["y"])


# -- per-branch tables -------------------------------------------------------

@dataclass(frozen=True)
class _Table:
    """Per-grid-point margin ``E[y f_i]``, regularizer ``h_i`` and feature magnitudes."""

    margin: np.ndarray
    h: np.ndarray
    max_yf: np.ndarray  # per sample, max over the grid of y f_i
    max_abs: np.ndarray  # per sample, max over the grid of |f_i|


def _table(branch: BranchSpec, data: Dataset) -> _Table:
    F = branch.features(data.x)
    yF = F * data.y
    return _Table(yF @ data.weights, branch.h(), yF.max(axis=0), np.abs(F).max(axis=0))


def _tables(branches, data):
    cache, out = {}, []
    for b in branches:
        key = id(b)
        if key not in cache:
            cache[key] = _table(b, data)
        out.append(cache[key])
    return out


def branch_risk(branch, data, tau) -> np.ndarray:
    """``g_i(w) = 1 - E[y f_i(w; x)] / tau`` at every grid point."""
    _check_tau(tau)
    return 1.0 - _table(branch, data).margin / tau


def _check_tau(tau):
    if not tau > 0:
        raise ArgumentError(f"tau must be positive, got {tau}")


# -- risk and the margin assumption ------------------------------------------

def tau_hinge_risk(params, branches, data, tau) -> float:
    """``E max(0, 1 - y f(w; x) / tau)`` for the averaged network ``f = (1/I) sum_i f_i``.

    ``params`` holds one parameter vector per branch. The true hinge is
    used, so the value is meaningful when the margin assumption fails.
    """
    _check_tau(tau)
    if len(params) != len(branches):
        raise ArgumentError(f"{len(params)} parameter vectors for {len(branches)} branches")
    f = sum(b.features(data.x, p)[0] for b, p in zip(branches, params)) / len(branches)
    return float(np.dot(data.weights, np.maximum(0.0, 1.0 - data.y * f / tau)))


@dataclass
class AssumptionCheck:
    ok: bool
    max_margin: float
    sample: int
    witness: list  # grid index per branch attaining the max margin on ``sample``

    def __bool__(self):
        return self.ok


def check_assumption_tau(branches, data, tau) -> AssumptionCheck:
    """Exact check of ``tau > y f(w; x)`` over the full product of grids.

    The largest margin on a sample is the sum of per-branch maxima, so the
    check is exact without enumerating the product. Zero-weight samples
    are ignored.
    """
    _check_tau(tau)
    I = len(branches)
    per_sample = np.zeros(len(data))
    witness = []
    for b in branches:
        yF = b.features(data.x) * data.y
        per_sample += yF.max(axis=0)
        witness.append(yF.argmax(axis=0))
    per_sample /= I
    per_sample[data.weights == 0] = -np.inf
    n = int(np.argmax(per_sample))
    m = float(per_sample[n])
    return AssumptionCheck(tau > m, m, n, [int(w[n]) for w in witness])


def default_tau(branches, data) -> float:
    """``2 (1 + max |f|)``, which satisfies the margin assumption by construction."""
    bound = max(float(np.max(sum(t.max_abs for t in _tables(branches, data)) / len(branches))), 0.0)
    return 2.0 * (1.0 + bound)


def default_budget(branches, data=None, samples=1000, quantile=0.3, seed=0) -> float:
    """30th percentile of ``(1/I) sum_i h_i`` over random grid assignments."""
    rng = np.random.default_rng(seed)
    H = np.zeros(samples)
    for b in branches:
        H += b.h()[rng.integers(0, b.size, size=samples)]
    return float(np.quantile(H / len(branches), quantile))


# -- primal ------------------------------------------------------------------

def _within_budget(total_h, I, K):
    return total_h <= I * K + FP_SLACK * (1.0 + abs(I * K))


def _pareto(h, g):
    """Indices of the (h ascending, g strictly decreasing) frontier."""
    order = np.lexsort((g, h))
    keep, best = [], np.inf
    for k in order:
        if g[k] < best:
            keep.append(k)
            best = g[k]
    return np.asarray(keep, dtype=np.int64)


@dataclass
class PrimalSolution:
    value: float
    argmin: list  # grid index per branch
    total_h: float
    method: str
    frontier_size: int = 0


def primal_inf(branches, data, tau, K, risks=None) -> PrimalSolution:
    """Exact ``inf P`` on the grids by a Pareto-frontier dynamic program.

    Partial sums are kept as a frontier of (budget used, risk) pairs; a pair
    is dropped when another uses no more budget with no more risk, or when
    the budget left cannot cover the cheapest choice of the remaining
    branches. No quantization is involved, so the value is exact.
    """
    I = len(branches)
    g_list = risks if risks is not None else [1.0 - t.margin / tau for t in _tables(branches, data)]
    h_list = [b.h() for b in branches]
    cheapest = np.array([h.min() for h in h_list])
    if not _within_budget(cheapest.sum(), I, K):
        raise InfeasibleError(f"budget K={K} is below the smallest achievable mean regularizer {cheapest.sum() / I}")
    tail = np.concatenate([np.cumsum(cheapest[::-1])[::-1][1:], [0.0]])

    fh, fg = np.zeros(1), np.zeros(1)
    back = []
    for i, (h, g) in enumerate(zip(h_list, g_list)):
        local = _pareto(h, g)
        Hs = (fh[:, None] + h[local][None, :]).ravel()
        Gs = (fg[:, None] + g[local][None, :]).ravel()
        ok = _within_budget(Hs + tail[i], I, K)
        cand = np.nonzero(ok)[0]
        keep = cand[_pareto(Hs[cand], Gs[cand])]
        if keep.size > FRONTIER_CAP:
            raise ArgumentError(
                f"Pareto frontier reached {keep.size} states at branch {i}; use coarser grids or fewer branches"
            )
        back.append((keep // local.size, local[keep % local.size]))
        fh, fg = Hs[keep], Gs[keep]

    best = int(np.argmin(fg))
    choice, k = [], best
    for parent, idx in reversed(back):
        choice.append(int(idx[k]))
        k = int(parent[k])
    choice.reverse()
    return PrimalSolution(float(fg[best] / I), choice, float(fh[best]), "pareto", int(fh.size))


def _product_size(branches):
    return prod(b.size for b in branches)


def primal_inf_exhaustive(branches, data, tau, K, hinge=False) -> PrimalSolution:
    """Enumerate every grid assignment (small instances only).

    With ``hinge=True`` the true hinge risk of the averaged network is
    used instead of the separable affine form.
    """
    vals, Hs = _joint_tables(branches, data, tau, hinge)
    I = len(branches)
    ok = _within_budget(Hs * I, I, K)
    if not np.any(ok):
        raise InfeasibleError(f"no grid assignment meets the budget K={K}")
    masked = np.where(ok, vals, np.inf)
    flat = int(np.argmin(masked))
    idx = np.unravel_index(flat, [b.size for b in branches])
    return PrimalSolution(float(masked[flat]), [int(i) for i in idx], float(Hs[flat] * I), "exhaustive")


def _joint_tables(branches, data, tau, hinge):
    """Risk and mean regularizer for every joint assignment, flattened in product order."""
    _check_tau(tau)
    size = _product_size(branches)
    if size > ENUMERATION_CAP:
        raise ArgumentError(f"{size} joint assignments exceed the enumeration cap {ENUMERATION_CAP}")
    I = len(branches)
    Hs = np.zeros(1)
    for b in branches:
        Hs = (Hs[:, None] + b.h()[None, :]).ravel()
    Hs = Hs / I
    if not hinge:
        G = np.zeros(1)
        for t in _tables(branches, data):
            G = (G[:, None] + (1.0 - t.margin / tau)[None, :]).ravel()
        return G / I, Hs
    F = np.zeros((1, len(data)))
    for b in branches:
        Fi = b.features(data.x)
        F = (F[:, None, :] + Fi[None, :, :]).reshape(-1, len(data))
    F /= I
    risk = np.maximum(0.0, 1.0 - data.y * F / tau) @ data.weights
    return risk, Hs


# -- dual --------------------------------------------------------------------

def _branch_terms(branches, data, tau):
    return [(1.0 - t.margin / tau, b.h()) for b, t in zip(branches, _tables(branches, data))]


def dual_Q(lam, branches, data, tau) -> float:
    """``Q(lam) = (1/I) sum_i min_w [g_i(w) + lam h_i(w)]``, one minimization per branch."""
    if lam < 0:
        raise ArgumentError(f"lambda must be non-negative, got {lam}")
    _check_tau(tau)
    return _Q(lam, _branch_terms(branches, data, tau))


def _Q(lam, terms):
    return float(sum(np.min(g + lam * h) for g, h in terms) / len(terms))


def _lower_hull(h, g):
    """Vertices of the lower convex hull of the (h, g) cloud, sorted by h."""
    order = np.lexsort((g, h))
    hs, gs = h[order], g[order]
    first = np.ones(hs.size, dtype=bool)
    first[1:] = hs[1:] != hs[:-1]
    hs, gs = hs[first], gs[first]
    out = []
    for k in range(hs.size):
        while len(out) >= 2:
            o, a = out[-2], out[-1]
            if (hs[a] - hs[o]) * (gs[k] - gs[o]) - (gs[a] - gs[o]) * (hs[k] - hs[o]) <= 0:
                out.pop()
            else:
                break
        out.append(k)
    return hs[out], gs[out]


def _breakpoints(g, h):
    """Values of lam > 0 where the minimizer of ``g + lam h`` over the grid changes."""
    hs, gs = _lower_hull(h, g)
    slopes = np.diff(gs) / np.diff(hs)
    return -slopes[slopes < 0]


@dataclass
class DualSolution:
    value: float
    lambda_star: float
    at_boundary: bool
    lambda_max: float


def dual_sup(branches, data, tau, K, lambda_max=None) -> DualSolution:
    """Maximize the concave piecewise-linear ``Q(lam) - lam K`` over ``[0, lambda_max]``.

    The maximum of a concave piecewise-linear function sits at a breakpoint
    (or at 0 or ``lambda_max``), so evaluating every breakpoint is exact.
    By default ``lambda_max`` is twice the largest breakpoint, past which
    the dual function no longer changes slope. ``at_boundary`` flags a
    maximizer pinned at a user-supplied ``lambda_max`` that is too small.
    """
    _check_tau(tau)
    terms = _branch_terms(branches, data, tau)
    return _dual_sup_terms(terms, K, lambda_max)


def _dual_sup_terms(terms, K, lambda_max=None):
    bps = np.unique(np.concatenate([_breakpoints(g, h) for g, h in terms] + [np.zeros(1)]))
    auto = 2.0 * float(bps.max()) if bps.max() > 0 else 1.0
    lmax = auto if lambda_max is None else float(lambda_max)
    if lmax <= 0:
        raise ArgumentError("lambda_max must be positive")
    cand = np.unique(np.concatenate([bps[bps <= lmax], [lmax]]))
    vals = np.array([_Q(l, terms) - l * K for l in cand])
    k = int(np.argmax(vals))
    lam = float(cand[k])
    boundary = False
    if lam == lmax:
        # slope just past lambda_max: mean regularizer of the minimizers minus K
        step = 1e-9 * (1.0 + lmax)
        boundary = (_Q(lmax + step, terms) - (lmax + step) * K) > vals[k] + FP_SLACK
    return DualSolution(float(vals[k]), lam, bool(boundary), lmax)


def dual_sup_hinge(branches, data, tau, K) -> DualSolution:
    """Dual optimum with the true (non-separable) hinge risk, by joint enumeration.

    The dual function is the lower conjugate of the joint (budget, risk)
    point cloud, so its maximum is the lowest point of the cloud's hull
    at budget ``K``.
    """
    risk, Hs = _joint_tables(branches, data, tau, hinge=True)
    hull = convex_hull(np.column_stack([Hs, risk]))
    value = epigraph_inf(hull, K)
    g, h = risk, Hs
    lams = np.concatenate([[0.0], _breakpoints(g, h)])
    vals = [float(np.min(g + l * h)) - l * K for l in lams]
    k = int(np.argmax(vals))
    return DualSolution(float(value), float(lams[k]), False, float(lams.max()))


# -- branch non-convexity ----------------------------------------------------

def _staircase_gap(h, g):
    """Largest gap between the budget staircase and the convexified (h, g) cloud.

    ``S(r) = min{g : h <= r}`` against the non-increasing lower hull of the
    points. On every step ``[h_k, h_{k+1})`` the supremum is approached at
    the right end.
    """
    hs = np.unique(h)
    if hs.size < 2:
        return 0.0
    S = np.array([g[h <= v].min() for v in hs])
    lh, lg = _lower_hull(h, g)
    lower = np.interp(hs, lh, lg)
    L = np.minimum.accumulate(lower)
    return float(max(0.0, np.max(S[:-1] - L[1:])))


def compute_delta(branch, data, tau) -> float:
    """Grid estimate of the branch non-convexity ``Delta_i``.

    ``f_hat(w) = min{g(v) : h(v) <= h(w)}`` over the grid and ``f_tilde`` is
    the convex envelope of ``g`` over the parameter grid; the result is
    ``max(f_hat - f_tilde, 0)`` over grid points.
    """
    _check_tau(tau)
    g = branch_risk(branch, data, tau)
    return _delta_from(branch, g)


def _delta_from(branch, g):
    if branch.size == 1:
        return 0.0
    h = branch.h()
    order = np.argsort(h, kind="stable")
    hs, gs = h[order], g[order]
    runmin = np.minimum.accumulate(gs)
    # ties in h share the minimum over the whole tie block
    last = np.searchsorted(hs, hs, side="right") - 1
    f_hat = np.empty_like(g)
    f_hat[order] = runmin[last]
    env = ConvexEnvelope(branch.grid, g, branch.param_dim, (branch.lo, branch.hi))
    f_tilde = env(branch.grid)
    return float(max(0.0, np.max(f_hat - f_tilde)))


# -- the bound ---------------------------------------------------------------

@dataclass
class GapReport:
    I: int
    K: float
    tau: float
    inf_P: float
    sup_D: float
    lambda_star: float
    gap: float
    delta_i: list
    delta_worst: float
    bound: float
    eps_grid: float
    assumption_tau_ok: bool
    max_margin: float
    weak_ok: bool
    bound_ok: bool
    lambda_at_boundary: bool
    argmin: list
    delta_epi_worst: float

    @property
    def passed(self) -> bool:
        return self.weak_ok and (self.bound_ok or not self.assumption_tau_ok)

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float) + "\n"

    CSV_FIELDS = ("I", "K", "tau", "inf_P", "sup_D", "lambda_star", "gap", "delta_worst", "bound",
                  "eps_grid", "assumption_tau_ok", "weak_ok", "bound_ok", "passed")

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS) + "\n"

    def csv_row(self) -> str:
        d = self.to_dict()
        return ",".join(_csv(d[k]) for k in self.CSV_FIELDS) + "\n"

    def to_csv(self) -> str:
        return self.csv_header() + self.csv_row()


def _csv(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def verify_theorem1(branches, data, tau=None, K=None, lambda_max=None) -> GapReport:
    """Solve both problems on the grids and test ``0 <= inf P - sup D <= (2/I) Delta_worst``.

    ``eps_grid`` is the slack owed to the grids: the bound is exact for the
    staircase non-convexity of the sampled (h, g) clouds, so the excess of
    that quantity over the parameter-space estimate ``Delta_worst`` (times
    2/I) plus a floating-point allowance is reported as slack. When the
    margin assumption fails, both problems are solved by enumeration with
    the true hinge and only weak duality is tested.
    """
    I = len(branches)
    if I == 0:
        raise ArgumentError("need at least one branch")
    tau = default_tau(branches, data) if tau is None else float(tau)
    _check_tau(tau)
    K = default_budget(branches) if K is None else float(K)
    check = check_assumption_tau(branches, data, tau)

    deltas, epis, memo = [], [], {}
    for b in branches:
        if id(b) not in memo:
            g = branch_risk(b, data, tau)
            memo[id(b)] = (_delta_from(b, g), _staircase_gap(b.h(), g))
        deltas.append(memo[id(b)][0])
        epis.append(memo[id(b)][1])
    d_worst = max(deltas)
    e_worst = max(epis)
    fp = FP_SLACK * (1.0 + max(1.0, abs(K)))

    if check.ok:
        primal = primal_inf(branches, data, tau, K)
        dual = dual_sup(branches, data, tau, K, lambda_max)
    else:
        primal = primal_inf_exhaustive(branches, data, tau, K, hinge=True)
        dual = dual_sup_hinge(branches, data, tau, K)

    gap = primal.value - dual.value
    eps = (2.0 / I) * max(0.0, e_worst - d_worst) + fp
    bound = (2.0 / I) * d_worst
    return GapReport(
        I=I, K=K, tau=tau, inf_P=primal.value, sup_D=dual.value, lambda_star=dual.lambda_star,
        gap=gap, delta_i=deltas, delta_worst=d_worst, bound=bound, eps_grid=eps,
        assumption_tau_ok=check.ok, max_margin=check.max_margin,
        weak_ok=bool(gap >= -eps), bound_ok=bool(gap <= bound + eps),
        lambda_at_boundary=dual.at_boundary, argmin=primal.argmin, delta_epi_worst=e_worst,
    )


def replicate(branch, I):
    return [branch] * I


def gap_sweep(branch, data, I_values, tau=None, K=None):
    """Reports for ``I`` replicas of one branch; ``tau`` and ``K`` are fixed across the sweep.

    Defaults come from the first ``I``: with identical replicas both the
    feature bound and the budget distribution's location do not depend on
    ``I``, so holding them fixed keeps the sweep comparable.
    """
    I_values = list(I_values)
    if not I_values:
        raise ArgumentError("empty sweep")
    base = replicate(branch, I_values[0])
    tau = default_tau(base, data) if tau is None else tau
    K = default_budget(base) if K is None else K
    return [verify_theorem1(replicate(branch, I), data, tau, K) for I in I_values]


def load_instance(obj):
    """``(branches, data, tau, K)`` from an instance dictionary.

    ``branches`` is a list of branch entries; a single entry is replicated
    ``I`` times.
    """
    unknown = set(obj) - {"branches", "dataset", "tau", "K", "I"}
    if unknown:
        raise ArgumentError(f"unknown instance key(s): {sorted(unknown)}")
    for key in ("branches", "dataset"):
        if key not in obj:
            raise ArgumentError(f"instance is missing {key!r}")
    specs = [branch_from_dict(b) for b in obj["branches"]]
    I = int(obj.get("I", len(specs)))
    if len(specs) == 1:
        specs = specs * I
    elif len(specs) != I:
        raise ArgumentError(f"{len(specs)} branch entries but I={I}")
    data = dataset_from_dict(obj["dataset"])
    return specs, data, obj.get("tau"), obj.get("K")
