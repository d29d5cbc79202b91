"""Planar geometry for augmented epigraphs.

Finite point sets in the plane stand in for the (compact) augmented
epigraphs of each branch. On finite sets every statement about Minkowski
sums, convex hulls and the Shapley-Folkman decomposition becomes exactly
checkable, which is what the routines here are for.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .errors import ArgumentError, InfeasibleError, MembershipError

MINKOWSKI_CAP = 2_000_000
COLLINEAR_TOL = 1e-12


def _points(pts, name="points") -> np.ndarray:
    P = np.asarray(pts, dtype=np.float64)
    if P.ndim == 1 and P.size == 2:
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] != 2 or P.shape[0] == 0:
        raise ArgumentError(f"{name} must be a non-empty (N, 2) array, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ArgumentError(f"{name} has non-finite coordinates")
    return P


@dataclass(frozen=True)
class PlanarSet:
    """Finite set of ``(r, w)`` points, optionally tagged with the branch it came from."""

    points: np.ndarray
    provenance: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _points(self.points))

    def __len__(self):
        return self.points.shape[0]

    def scaled(self, c) -> "PlanarSet":
        return PlanarSet(self.points * c, self.provenance)

    def to_csv(self) -> str:
        return "r,w\n" + "".join(f"{r:.17g},{w:.17g}\n" for r, w in self.points)


def _as_points(s) -> np.ndarray:
    if isinstance(s, PlanarSet):
        return s.points
    if isinstance(s, ConvexHull2D):
        return s.vertices
    return _points(s)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _turns_left(o, a, b):
    """Strict left turn, treating |sin(angle)| <= COLLINEAR_TOL as collinear."""
    c = _cross(o, a, b)
    scale = np.hypot(a[0] - o[0], a[1] - o[1]) * np.hypot(b[0] - o[0], b[1] - o[1])
    return c > COLLINEAR_TOL * scale


@dataclass(frozen=True)
class ConvexHull2D:
    """Extreme points in counter-clockwise order, starting at the lexicographically smallest."""

    vertices: np.ndarray
    index: np.ndarray = field(default=None, repr=False)  # row of each vertex in the input

    def __len__(self):
        return self.vertices.shape[0]

    def edges(self):
        V = self.vertices
        return [(V[k], V[(k + 1) % len(V)]) for k in range(len(V))] if len(V) > 1 else []

    def support(self, u) -> float:
        return float(np.max(self.vertices @ np.asarray(u, dtype=np.float64)))

    def area(self) -> float:
        V = self.vertices
        if len(V) < 3:
            return 0.0
        x, y = V[:, 0], V[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def distance(self, y) -> float:
        """Euclidean distance from ``y`` to the hull (0 inside)."""
        return _hull_distance(self.vertices, np.asarray(y, dtype=np.float64))[0]

    def contains(self, y, tol=1e-12) -> bool:
        scale = 1.0 + float(np.max(np.abs(self.vertices)))
        return self.distance(y) <= tol * scale

    def to_csv(self) -> str:
        return "r,w\n" + "".join(f"{r:.17g},{w:.17g}\n" for r, w in self.vertices)


def convex_hull(s) -> ConvexHull2D:
    """Andrew's monotone chain; collinear and duplicate points are dropped."""
    P = _as_points(s)
    order = np.lexsort((P[:, 1], P[:, 0]))
    pts = P[order]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts, order = pts[keep], order[keep]
    if len(pts) <= 2:
        return ConvexHull2D(pts.copy(), order.copy())

    def chain(idx):
        out = []
        for k in idx:
            while len(out) >= 2 and not _turns_left(pts[out[-2]], pts[out[-1]], pts[k]):
                out.pop()
            out.append(k)
        return out

    lower = chain(range(len(pts)))
    upper = chain(range(len(pts) - 1, -1, -1))
    hull = lower[:-1] + upper[:-1]
    if len(hull) == 2 and np.all(pts[hull[0]] == pts[hull[1]]):
        hull = hull[:1]
    return ConvexHull2D(pts[hull].copy(), order[hull].copy())


def _hull_distance(V, y):
    """Distance from ``y`` to conv(V) and the unit direction from the hull towards ``y``."""
    if len(V) == 1:
        d = y - V[0]
        n = float(np.hypot(*d))
        return n, (d / n if n > 0 else None)
    inside = len(V) >= 3 and all(_cross(V[k], V[(k + 1) % len(V)], y) >= 0 for k in range(len(V)))
    if inside:
        return 0.0, None
    best, arg = np.inf, None
    for k in range(len(V) if len(V) >= 3 else 1):
        a, b = V[k], V[(k + 1) % len(V)]
        ab = b - a
        t = np.clip(np.dot(y - a, ab) / np.dot(ab, ab), 0.0, 1.0)
        d = y - (a + t * ab)
        n = float(np.hypot(*d))
        if n < best:
            best, arg = n, d
    return best, (arg / best if best > 0 else None)


# -- Minkowski sums ----------------------------------------------------------

def minkowski_sum(sets, cap=MINKOWSKI_CAP) -> PlanarSet:
    """Every sum ``y_1 + ... + y_I`` with ``y_i`` from set ``i``, enumerated in product order."""
    arrays = [_as_points(s) for s in sets]
    if not arrays:
        raise ArgumentError("need at least one set")
    size = prod(len(a) for a in arrays)
    if size > cap:
        raise ArgumentError(
            f"Minkowski sum would have {size} points (cap {cap}); use coarser grids"
        )
    acc = arrays[0]
    for a in arrays[1:]:
        acc = (acc[:, None, :] + a[None, :, :]).reshape(-1, 2)
    return PlanarSet(acc)


def _edge_walk(hulls):
    """Minkowski sum of convex polygons by merging edge sequences by angle.

    Returns the walk's vertex list (may contain collinear runs) and, for
    every walk vertex, the index of the contributing vertex in each hull.
    """
    starts, edges = [], []
    for h, H in enumerate(hulls):
        V = H.vertices
        k0 = int(np.lexsort((V[:, 0], V[:, 1]))[0])  # lowest, then leftmost
        starts.append(k0)
        if len(V) < 2:
            continue
        for j in range(len(V)):
            a, b = V[(k0 + j) % len(V)], V[(k0 + j + 1) % len(V)]
            ang = np.arctan2(b[1] - a[1], b[0] - a[0])
            if ang < 0:
                ang += 2 * np.pi
            edges.append((ang, h, j))
    edges.sort(key=lambda e: (e[0], e[1], e[2]))
    cur = list(starts)
    point = sum(H.vertices[k] for H, k in zip(hulls, cur))
    walk, tuples = [point.copy()], [tuple(cur)]
    for _, h, _ in edges[:-1] if edges else []:
        V = hulls[h].vertices
        nxt = (cur[h] + 1) % len(V)
        point = point + (V[nxt] - V[cur[h]])
        cur[h] = nxt
        walk.append(point.copy())
        tuples.append(tuple(cur))
    # recompute the walk from index tuples to avoid drift along long chains
    walk = np.array([sum(H.vertices[k] for H, k in zip(hulls, t)) for t in tuples])
    return walk, tuples


def hull_minkowski_sum(hulls) -> ConvexHull2D:
    """``conv(A_1) + ... + conv(A_I)`` computed from the hulls alone."""
    hulls = [h if isinstance(h, ConvexHull2D) else convex_hull(h) for h in hulls]
    walk, _ = _edge_walk(hulls)
    return convex_hull(walk)


def minkowski_average_identical(s, copies) -> PlanarSet:
    """``(1/I)(S + ... + S)`` for ``I`` copies of one set, built from multisets.

    Sums over permutations of the same choices coincide, so only the
    ``C(|S| + I - 1, I)`` multisets are enumerated.
    """
    P = _as_points(s)
    # counts-based recursion: acc holds sums of k copies, deduplicated exactly
    acc = np.zeros((1, 2))
    for _ in range(copies):
        acc = (acc[:, None, :] + P[None, :, :]).reshape(-1, 2)
        acc = np.unique(np.round(acc, 12), axis=0)
    return PlanarSet(acc / copies)


def hausdorff_to_hull(s, samples_per_edge=40) -> float:
    """Largest distance from a point of ``conv(S)`` to the nearest point of ``S``.

    The hull is sampled on a barycentric lattice of each fan triangle; the
    lattice resolution bounds the sampling error.
    """
    P = _as_points(s)
    H = convex_hull(P)
    V = H.vertices
    if len(V) < 3:
        if len(V) == 1:
            return 0.0
        t = np.linspace(0, 1, samples_per_edge + 1)[:, None]
        Q = V[0] + t * (V[1] - V[0])
    else:
        m = samples_per_edge
        ij = np.array([(i, j) for i in range(m + 1) for j in range(m + 1 - i)], dtype=np.float64) / m
        Q = np.concatenate([
            V[0] + ij[:, :1] * (V[k] - V[0]) + ij[:, 1:] * (V[k + 1] - V[0])
            for k in range(1, len(V) - 1)
        ])
    best = np.full(len(Q), np.inf)
    for start in range(0, len(P), 2048):
        chunk = P[start:start + 2048]
        d = np.hypot(Q[:, None, 0] - chunk[None, :, 0], Q[:, None, 1] - chunk[None, :, 1])
        best = np.minimum(best, d.min(axis=1))
    return float(best.max())


# -- Shapley-Folkman decomposition -------------------------------------------

@dataclass
class SFDecomposition:
    """``target = sum(pure points) + sum_i sum_j a_i^j p_i^j`` with at most two convexified sets.

    ``pure`` maps set index -> row of the chosen point in that set;
    ``convexified`` maps set index -> list of ``(row, weight)`` pairs
    (at most three, weights non-negative and summing to one).
    """

    target: np.ndarray
    pure: dict
    convexified: dict

    def reconstruct(self, sets) -> np.ndarray:
        arrays = [_as_points(s) for s in sets]
        total = np.zeros(2)
        for i, k in self.pure.items():
            total = total + arrays[i][k]
        for i, pairs in self.convexified.items():
            for k, a in pairs:
                total = total + a * arrays[i][k]
        return total


def _barycentric(y, pts):
    """Convex weights of ``y`` w.r.t. 1-3 points, with the residual of the best fit."""
    if len(pts) == 1:
        return np.array([1.0]), float(np.hypot(*(y - pts[0])))
    if len(pts) == 2:
        a, b = pts
        ab = b - a
        den = float(np.dot(ab, ab))
        t = 0.0 if den == 0 else float(np.clip(np.dot(y - a, ab) / den, 0, 1))
        return np.array([1 - t, t]), float(np.hypot(*(y - a - t * ab)))
    A = np.vstack([np.asarray(pts).T, np.ones(3)])
    try:
        w = np.linalg.solve(A, np.array([y[0], y[1], 1.0]))
    except np.linalg.LinAlgError:
        return None, np.inf
    if w.min() < -1e-12:
        return None, np.inf
    w = np.maximum(w, 0.0)
    w /= w.sum()
    return w, float(np.hypot(*(y - w @ np.asarray(pts))))


def sf_decompose(y, sets, tol=1e-9) -> SFDecomposition:
    """Write a point of ``conv(Y_1 + ... + Y_I)`` using at most two convexified summands.

    The point is first expressed through at most three vertices of the
    summed hull, which assigns a convex combination to every set. The
    combination is then pivoted: while three or more sets still carry
    fractional weight, the three weight-shift directions of three such sets
    are linearly dependent in the plane, and moving along their null
    combination preserves the target while zeroing at least one weight.

    Raises
    ------
    MembershipError
        If ``y`` is farther than ``tol`` (relative) from the summed hull;
        ``direction`` points from the hull towards ``y``.
    """
    y = np.asarray(y, dtype=np.float64).reshape(2)
    arrays = [_as_points(s) for s in sets]
    if not arrays:
        raise ArgumentError("need at least one set")
    hulls = [convex_hull(a) for a in arrays]
    walk, tuples = _edge_walk(hulls)
    scale = 1.0 + float(np.max(np.abs(walk)))
    outer = convex_hull(walk)
    dist, direction = _hull_distance(outer.vertices, y)
    if dist > tol * scale:
        raise MembershipError(f"point {y} lies {dist:.3e} outside the summed hull", direction)

    # the fan of the walk polygon covers it; also try edges for flat polygons
    m = len(walk)
    best_w, best_idx, best_res = None, None, np.inf
    candidates = [(0, k, k + 1) for k in range(1, m - 1)] + [(k, (k + 1) % m) for k in range(m)] + [(0,)]
    for cand in candidates:
        w, res = _barycentric(y, walk[list(cand)])
        if w is not None and res < best_res:
            best_w, best_idx, best_res = w, cand, res
            if res <= 1e-15 * scale and len(cand) == 3:
                break

    # weights[i] : {row in arrays[i] -> weight}
    weights = [dict() for _ in arrays]
    for a, j in zip(best_w, best_idx):
        if a <= 0:
            continue
        for i, k in enumerate(tuples[j]):
            row = int(hulls[i].index[k])
            weights[i][row] = weights[i].get(row, 0.0) + float(a)

    while True:
        frac = [i for i, w in enumerate(weights) if len(w) >= 2]
        if len(frac) <= 2:
            break
        trio = frac[:3]
        pairs = []
        for i in trio:
            rows = sorted(weights[i])[:2]
            pairs.append((i, rows[0], rows[1]))
        D = np.array([arrays[i][ra] - arrays[i][rb] for i, ra, rb in pairs]).T  # 2 x 3
        c = np.linalg.svd(D)[2][-1]
        # move weight t*c_k from rb to ra; largest t keeping all six weights >= 0
        limits = []
        for ck, (i, ra, rb) in zip(c, pairs):
            if ck > 0:
                limits.append((weights[i][rb] / ck, i, rb))
            elif ck < 0:
                limits.append((weights[i][ra] / -ck, i, ra))
        t, i_hit, r_hit = min(limits)
        for ck, (i, ra, rb) in zip(c, pairs):
            weights[i][ra] += t * ck
            weights[i][rb] -= t * ck
        weights[i_hit][r_hit] = 0.0
        for w in weights:
            for r in [r for r, v in w.items() if v <= 1e-15]:
                del w[r]
            total = sum(w.values())
            for r in w:
                w[r] /= total

    pure, convexified = {}, {}
    for i, w in enumerate(weights):
        if len(w) == 1:
            pure[i] = next(iter(w))
        else:
            convexified[i] = _caratheodory(arrays[i], w)
    return SFDecomposition(y, pure, convexified)


def _caratheodory(P, w):
    """Reduce a convex combination in the plane to at most three points."""
    w = dict(w)
    while len(w) > 3:
        rows = sorted(w)[:4]
        A = np.vstack([P[rows].T, np.ones(4)])  # 3 x 4
        c = np.linalg.svd(A)[2][-1]
        if c.max() <= 0:
            c = -c
        t = min(w[r] / ck for r, ck in zip(rows, c) if ck > 0)
        for r, ck in zip(rows, c):
            w[r] -= t * ck
        for r in [r for r in rows if w[r] <= 1e-15]:
            del w[r]
    total = sum(w.values())
    return [(r, v / total) for r, v in sorted(w.items())]


# -- envelopes and epigraph minima -------------------------------------------

class ConvexEnvelope:
    """Lower convex envelope of sampled values over a 1-D or 2-D parameter box.

    Evaluation outside the declared box raises ``ArgumentError``. Within the
    box but outside the hull of the sample parameters the envelope is
    ``+inf`` (no convex combination reaches the point).
    """

    def __init__(self, params, values, dim, box=None):
        P = np.asarray(params, dtype=np.float64).reshape(len(values), -1)
        v = np.asarray(values, dtype=np.float64).ravel()
        if dim not in (1, 2) or P.shape[1] != dim:
            raise ArgumentError(f"parameters must be {dim}-D and dim must be 1 or 2")
        if len(v) < 2 and dim == 1 or len(v) < 1:
            raise ArgumentError("need at least two samples")
        self.dim = dim
        self.lo = P.min(axis=0) if box is None else np.asarray(box[0], dtype=np.float64).reshape(dim)
        self.hi = P.max(axis=0) if box is None else np.asarray(box[1], dtype=np.float64).reshape(dim)
        if np.any(P < self.lo - 1e-12) or np.any(P > self.hi + 1e-12):
            raise ArgumentError("samples lie outside the declared box")
        self.params, self.values = P, v
        if dim == 1:
            self._build_1d()
        else:
            self._build_2d()

    def _build_1d(self):
        x, v = self.params[:, 0], self.values
        order = np.lexsort((v, x))
        x, v = x[order], v[order]
        first = np.ones(len(x), dtype=bool)
        first[1:] = x[1:] != x[:-1]  # keep the minimum value per abscissa
        x, v = x[first], v[first]
        hull = []
        for k in range(len(x)):
            while len(hull) >= 2:
                o, a = hull[-2], hull[-1]
                if _cross((x[o], v[o]), (x[a], v[a]), (x[k], v[k])) <= 0:
                    hull.pop()
                else:
                    break
            hull.append(k)
        self._x, self._v = x[hull], v[hull]

    def _build_2d(self):
        from scipy.spatial import ConvexHull, QhullError

        P, v = self.params, self.values
        pts = np.column_stack([P, v])
        centred = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        span = sv[0] if sv.size else 0.0
        self._planes = None
        self._tris = None
        if sv.size < 3 or sv[2] <= 1e-12 * max(span, 1.0):
            # samples are coplanar (or lower-dimensional): the envelope is affine on their hull
            coef, *_ = np.linalg.lstsq(np.column_stack([P, np.ones(len(P))]), v, rcond=None)
            self._planes = coef[None, :]
            self._param_hull = convex_hull(P)
            return
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:  # pragma: no cover - guarded by the rank test above
            raise ArgumentError(f"envelope construction failed: {exc}") from exc
        lower = hull.equations[:, 2] < -1e-12
        eq = hull.equations[lower]
        # plane a x + b y + c z + d = 0  ->  z = -(a x + b y + d) / c
        self._planes = np.column_stack([-eq[:, 0] / eq[:, 2], -eq[:, 1] / eq[:, 2], -eq[:, 3] / eq[:, 2]])
        self._tris = P[hull.simplices[lower]]
        self._param_hull = convex_hull(P)

    def _check_box(self, q):
        if np.any(q < self.lo - 1e-12) or np.any(q > self.hi + 1e-12):
            raise ArgumentError(f"query {q} outside the parameter box [{self.lo}, {self.hi}]")

    def __call__(self, q):
        q = np.asarray(q, dtype=np.float64)
        if self.dim == 1:
            q = q.reshape(-1)
            for qq in q:
                self._check_box(np.array([qq]))
            out = np.interp(q, self._x, self._v)
            out[(q < self._x[0] - 1e-12) | (q > self._x[-1] + 1e-12)] = np.inf
            return out
        Q = q.reshape(-1, 2)
        out = np.empty(len(Q))
        for n, qq in enumerate(Q):
            self._check_box(qq)
            if not self._param_hull.contains(qq, tol=1e-10):
                out[n] = np.inf
                continue
            out[n] = self._facet_value(qq)
        return out

    def _facet_value(self, q):
        planes = self._planes
        if self._tris is not None:
            for tri, pl in zip(self._tris, planes):
                w, res = _barycentric(q, tri)
                if w is not None and res <= 1e-12 * (1.0 + np.abs(tri).max()):
                    return float(pl[0] * q[0] + pl[1] * q[1] + pl[2])
        # supporting planes of a convex function: the envelope is their maximum
        return float(np.max(planes[:, 0] * q[0] + planes[:, 1] * q[1] + planes[:, 2]))


def convex_envelope(samples, dim, box=None) -> ConvexEnvelope:
    """Build the lower convex envelope from ``(param, value)`` pairs."""
    params = [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p, _ in samples]
    values = [float(v) for _, v in samples]
    return ConvexEnvelope(np.array(params), np.array(values), dim, box)


def epigraph_inf(s, K, tol=1e-12) -> float:
    """``min{w : (r, w) in S, r <= K}`` for a point set or a convex hull.

    Over a hull the minimum also considers the points where edges cross
    the line ``r = K``.
    """
    if isinstance(s, ConvexHull2D):
        V = s.vertices
        slack = tol * (1.0 + abs(K))
        vals = [w for r, w in V if r <= K + slack]
        for a, b in s.edges():
            if (a[0] - K) * (b[0] - K) < 0:
                t = (K - a[0]) / (b[0] - a[0])
                vals.append(a[1] + t * (b[1] - a[1]))
        if not vals:
            raise InfeasibleError(f"no point of the hull has r <= {K}")
        return float(min(vals))
    P = _as_points(s)
    mask = P[:, 0] <= K + tol * (1.0 + abs(K))
    if not np.any(mask):
        raise InfeasibleError(f"no point of the set has r <= {K}")
    return float(P[mask, 1].min())
