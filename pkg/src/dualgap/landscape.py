"""Multi-branch ReLU networks trained by SGD, loss-surface slices and hitting rates.

Networks are bias-free: branch ``i`` maps ``x`` through weight matrices
with ReLU in between and a linear last layer, and the branch outputs are
summed (or averaged). All computations carry a leading population axis
so that many independently seeded networks train in one pass; a single
network is a population of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, GeometryError

LOSSES = ("tau_hinge", "multiclass_hinge", "squared")
DIVERGENCE_LEVEL = 1e10
BATCH_CHUNK = 1000


# -- architecture ------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    """``I`` identical branches with layer widths ``(d, n_1, ..., n_L, out)``."""

    d: int
    hidden: tuple
    I: int
    out: int = 1
    combine: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.d < 1 or self.I < 1 or self.out < 1 or any(h < 1 for h in self.hidden):
            raise ArgumentError(f"invalid architecture {self}")
        if self.combine not in ("sum", "mean"):
            raise ArgumentError("combine must be 'sum' or 'mean'")

    @property
    def widths(self):
        return (self.d,) + self.hidden + (self.out,)

    @property
    def shapes(self):
        w = self.widths
        return [(self.I, w[k + 1], w[k]) for k in range(len(w) - 1)]

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.shapes)

    @property
    def scale(self):
        return 1.0 if self.combine == "sum" else 1.0 / self.I


def one_hidden_layer(d, width, out=1) -> Architecture:
    """``f(x) = sum_i w_i2 [W_i1 x]_+`` with ``width`` single-unit branches."""
    return Architecture(d, (1,), width, out)


@dataclass(frozen=True)
class FlatParams:
    """All weights of one network as a single vector with a fixed layout."""

    arch: Architecture
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        if v.size != self.arch.n_params:
            raise ArgumentError(f"expected {self.arch.n_params} parameters, got {v.size}")
        object.__setattr__(self, "vector", v)

    def layers(self):
        out, k = [], 0
        for s in self.arch.shapes:
            n = int(np.prod(s))
            out.append(self.vector[k:k + n].reshape(s).copy())
            k += n
        return out

    @classmethod
    def from_layers(cls, arch, layers):
        return cls(arch, np.concatenate([np.asarray(W, dtype=np.float64).ravel() for W in layers]))


@dataclass
class MultiBranchNet:
    """One network: ``layers[k]`` has shape ``(I, n_{k+1}, n_k)``."""

    arch: Architecture
    layers: list

    def __post_init__(self):
        self.layers = [np.asarray(W, dtype=np.float64) for W in self.layers]
        if [W.shape for W in self.layers] != self.arch.shapes:
            raise ArgumentError(f"layer shapes {[W.shape for W in self.layers]} do not match {self.arch.shapes}")

    @classmethod
    def init(cls, arch, rng):
        """i.i.d. normal weights with per-layer standard deviation ``1/sqrt(fan_in)``."""
        return cls(arch, [rng.normal(size=s) / np.sqrt(s[2]) for s in arch.shapes])

    def flat(self) -> FlatParams:
        return FlatParams.from_layers(self.arch, self.layers)

    @classmethod
    def from_flat(cls, fp: FlatParams):
        return cls(fp.arch, fp.layers())

    def __call__(self, x):
        """Network output: shape ``(N,)`` for scalar output, else ``(N, out)``."""
        out = forward([W[None] for W in self.layers], np.asarray(x, dtype=np.float64), self.arch.scale)[0][0]
        return out[:, 0] if self.arch.out == 1 else out


# -- batched forward / backward ---------------------------------------------

def forward(layers, x, scale=1.0):
    """Population forward pass.

    ``layers[k]`` has shape ``(S, I, n_{k+1}, n_k)``; ``x`` is ``(B, d)`` shared
    by the population or ``(S, B, d)``. Returns the output ``(S, B, out)``
    and the cached activations for :func:`backward`. Activations are laid
    out as ``(S, B, I, n)`` so the first layer is one matrix product per
    member.
    """
    S, I, n1, d = layers[0].shape
    if len(layers) == 2 and n1 == 1:
        # single-unit branches: a dense one-hidden-layer net, the matmul sums the branches
        z = x @ np.swapaxes(layers[0][:, :, 0, :], -1, -2)
        out = np.maximum(z, 0.0) @ layers[1][:, :, :, 0]
        return scale * out, [x, z]
    W0 = layers[0].reshape(S, I * n1, d)
    z = (x @ np.swapaxes(W0, -1, -2)).reshape(S, -1, I, n1)
    cache = [x, z]
    for W in layers[1:]:
        z = np.einsum("sbin,sion->sbio", np.maximum(z, 0.0), W)
        cache.append(z)
    return scale * z.sum(axis=2), cache


def backward(layers, cache, dout, scale=1.0):
    """Gradients of a loss with output gradient ``dout`` (S, B, out) w.r.t. every layer."""
    S, B = dout.shape[:2]
    if len(layers) == 2 and layers[0].shape[2] == 1:
        x, z = cache
        dout = scale * dout
        g1 = np.swapaxes(np.maximum(z, 0.0), -1, -2) @ dout
        dz = (dout @ np.swapaxes(layers[1][:, :, :, 0], -1, -2)) * (z > 0)
        g0 = np.swapaxes(dz, -1, -2) @ x
        return [g0[:, :, None, :], g1[..., None]]
    dz = np.broadcast_to(scale * dout[:, :, None, :], (S, B) + layers[-1].shape[1:3])
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, 0, -1):
        a_prev = np.maximum(cache[k], 0.0)
        grads[k] = np.einsum("sbio,sbin->sion", dz, a_prev)
        dz = np.einsum("sbio,sion->sbin", dz, layers[k]) * (cache[k] > 0)
    x = cache[0]
    _, I, n1, d = layers[0].shape
    g0 = np.swapaxes(dz.reshape(S, B, I * n1), -1, -2) @ x
    grads[0] = g0.reshape(S, I, n1, d)
    return grads


def loss_and_grad(out, target, loss, tau=1.0):
    """Per-member mean loss (S,) and its gradient w.r.t. ``out`` (S, B, m).

    ``target`` is shared, shape (B,), or per member, shape (S, B). For the
    multiclass hinge it holds class indices.
    """
    B = out.shape[1]
    target = np.broadcast_to(target, out.shape[:2])
    if loss == "squared":
        r = out[..., 0] - target
        return 0.5 * np.mean(r * r, axis=1), (r / B)[..., None]
    if loss == "tau_hinge":
        m = 1.0 - target * out[..., 0] / tau
        active = m > 0
        return np.mean(np.where(active, m, 0.0), axis=1), (np.where(active, -target / tau, 0.0) / B)[..., None]
    if loss == "multiclass_hinge":
        labels = target.astype(np.int64)[..., None]
        m = 1.0 + out - np.take_along_axis(out, labels, axis=2)
        np.put_along_axis(m, labels, 0.0, axis=2)
        active = m > 0
        d = active.astype(np.float64)
        np.put_along_axis(d, labels, -d.sum(axis=2, keepdims=True), axis=2)
        return np.sum(np.where(active, m, 0.0), axis=(1, 2)) / B, d / B
    raise ArgumentError(f"unknown loss {loss!r}; choose from {LOSSES}")


# -- data --------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherData:
    """Inputs, teacher outputs, sign labels and class labels from a frozen teacher."""

    x: np.ndarray
    t: np.ndarray  # teacher output (N,) or (N, classes)
    teacher: MultiBranchNet

    @property
    def y(self):
        """Sign labels for the binary hinge losses (zero outputs count as +1)."""
        return np.where(self.t >= 0, 1.0, -1.0) if self.t.ndim == 1 else None

    @property
    def classes(self):
        return np.argmax(self.t, axis=1) if self.t.ndim == 2 else None

    def target(self, loss):
        if loss == "squared":
            return self.t
        if loss == "tau_hinge":
            if self.t.ndim != 1:
                raise ArgumentError("tau_hinge needs a scalar-output teacher")
            return self.y
        if loss == "multiclass_hinge":
            if self.t.ndim != 2:
                raise ArgumentError("multiclass_hinge needs a teacher with several outputs")
            return self.classes.astype(np.float64)
        raise ArgumentError(f"unknown loss {loss!r}; choose from {LOSSES}")

    def __len__(self):
        return self.x.shape[0]


def teacher_synthetic_data(n=1000, d=10, hidden=11, seed=0, classes=1) -> TeacherData:
    """Standard normal inputs labelled by a random one-hidden-layer ReLU teacher.

    The teacher's hidden layer has ``1/sqrt(d)`` scaled normal weights and
    its output weights alternate ``+1, -1, ...`` which keeps the labels
    roughly balanced and the target scale independent of ``hidden``.
    """
    if min(n, d, hidden, classes) < 1:
        raise ArgumentError("n, d, hidden and classes must be positive")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    arch = one_hidden_layer(d, hidden, classes)
    W1 = rng.normal(size=(hidden, 1, d)) / np.sqrt(d)
    W2 = np.where(np.arange(hidden * classes).reshape(hidden, classes, 1) % 2 == 0, 1.0, -1.0)
    teacher = MultiBranchNet(arch, [W1, W2])
    return TeacherData(x, teacher(x), teacher)


def dataset_loss(layers, data: TeacherData, loss, arch, tau=1.0):
    """Full-data loss of every population member: shape (S,)."""
    out, _ = forward(layers, data.x, arch.scale)
    return loss_and_grad(out, data.target(loss), loss, tau)[0]


# -- SGD ---------------------------------------------------------------------

@dataclass
class TrainResult:
    """Outcome of training a population; index ``s`` belongs to ``seeds[s]``."""

    arch: Architecture
    layers: list  # (S, I, out, in) per layer
    seeds: list
    final_loss: np.ndarray
    trace: np.ndarray  # (records, S), full-data loss every ``record_every`` steps
    failed: np.ndarray

    def net(self, s=0) -> MultiBranchNet:
        return MultiBranchNet(self.arch, [W[s].copy() for W in self.layers])


def seed_rng(master, trial):
    """Generator owned by one trial; independent of how trials are scheduled."""
    return np.random.default_rng([int(master), int(trial)])


def sgd_train(arch, data: TeacherData, loss="tau_hinge", seeds=(0,), iters=1000, lr=0.05, batch=32,
              tau=1.0, master_seed=0, record_every=100, init=None):
    """Minibatch SGD with hand-derived gradients for a population of seeds.

    Member ``s`` draws its initialization and all minibatch indices from
    ``seed_rng(master_seed, seeds[s])``, so its trajectory does not depend on
    the other members. A member whose loss becomes non-finite or exceeds
    ``DIVERGENCE_LEVEL`` is marked failed and frozen.
    """
    if not lr >= 0:
        raise ArgumentError(f"learning rate must be non-negative, got {lr}")
    if iters < 0 or batch < 1:
        raise ArgumentError("iters must be >= 0 and batch >= 1")
    if loss not in LOSSES:
        raise ArgumentError(f"unknown loss {loss!r}; choose from {LOSSES}")
    seeds = list(seeds)
    S, n = len(seeds), len(data)
    target = data.target(loss)
    rngs = [seed_rng(master_seed, s) for s in seeds]
    if init is None:
        members = [MultiBranchNet.init(arch, r).layers for r in rngs]
    else:
        members = [[np.asarray(W, dtype=np.float64).copy() for W in init] for _ in seeds]
    layers = [np.stack([m[k] for m in members]) for k in range(len(arch.shapes))]

    failed = np.zeros(S, dtype=bool)
    trace = []
    idx = None
    for step in range(iters):
        if record_every and step % record_every == 0:
            trace.append(dataset_loss(layers, data, loss, arch, tau))
        if step % BATCH_CHUNK == 0:
            idx = np.stack([r.integers(0, n, size=(BATCH_CHUNK, batch)) for r in rngs], axis=1)
        b = idx[step % BATCH_CHUNK]  # (S, batch)
        xb = data.x[b]
        tb = target[b]
        out, cache = forward(layers, xb, arch.scale)
        val, dout = loss_and_grad(out, tb, loss, tau)
        bad = ~np.isfinite(val) | (val > DIVERGENCE_LEVEL)
        failed |= bad
        grads = backward(layers, cache, dout, arch.scale)
        if failed.any():
            live = (~failed).astype(np.float64)[:, None, None, None]
            grads = [live * np.nan_to_num(g) for g in grads]
        for W, g in zip(layers, grads):
            W -= lr * g
    final = dataset_loss(layers, data, loss, arch, tau)
    failed |= ~np.isfinite(final) | (final > DIVERGENCE_LEVEL)
    if record_every:
        trace.append(final)
    return TrainResult(arch, layers, seeds, final, np.array(trace).reshape(-1, S), failed)


# -- plane projection --------------------------------------------------------

@dataclass
class ProjectionGrid:
    """Loss on the plane through three parameter vectors, ``loss[j, k]`` at ``(alpha[j], beta[k])``."""

    alpha: np.ndarray
    beta: np.ndarray
    loss: np.ndarray
    anchors: np.ndarray  # (3, 2) plane coordinates of theta_a, theta_b, theta_c

    def to_csv(self) -> str:
        rows = ["alpha,beta,loss\n"]
        for j, a in enumerate(self.alpha):
            for k, b in enumerate(self.beta):
                rows.append(f"{a:.17g},{b:.17g},{self.loss[j, k]:.17g}\n")
        return "".join(rows)


def _vec(t):
    return t.vector if isinstance(t, FlatParams) else np.asarray(t, dtype=np.float64).ravel()


def plane_basis(theta_a, theta_b, theta_c, tol=1e-12):
    """Orthonormal ``u, v`` spanning the plane through the three points."""
    a, b, c = _vec(theta_a), _vec(theta_b), _vec(theta_c)
    scale = max(1.0, float(np.max(np.abs(np.concatenate([a, b, c])))))
    db = b - a
    nb = float(np.linalg.norm(db))
    if nb <= tol * scale:
        raise GeometryError("theta_a and theta_b coincide")
    u = db / nb
    dc = c - a
    w = dc - np.dot(dc, u) * u
    nw = float(np.linalg.norm(w))
    if nw <= tol * scale * max(1.0, float(np.linalg.norm(dc))):
        raise GeometryError("the three parameter vectors are collinear")
    return u, w / nw


def plane_projection_grid(theta_a, theta_b, theta_c, loss_fn, resolution=41, margin=0.2, batched=False):
    """Evaluate ``loss_fn`` on ``theta_a + alpha u + beta v`` over the anchors' box plus ``margin``.

    With ``batched=True``, ``loss_fn`` receives a (P, n) array of parameter
    vectors and returns P losses; otherwise it is called once per point.
    """
    if resolution < 2:
        raise ArgumentError("resolution must be at least 2")
    a = _vec(theta_a)
    u, v = plane_basis(theta_a, theta_b, theta_c)
    anchors = np.array([[0.0, 0.0],
                        [np.dot(_vec(theta_b) - a, u), np.dot(_vec(theta_b) - a, v)],
                        [np.dot(_vec(theta_c) - a, u), np.dot(_vec(theta_c) - a, v)]])
    lo, hi = anchors.min(axis=0), anchors.max(axis=0)
    pad = margin * (hi - lo)
    alpha = np.linspace(lo[0] - pad[0], hi[0] + pad[0], resolution)
    beta = np.linspace(lo[1] - pad[1], hi[1] + pad[1], resolution)
    A, B = np.meshgrid(alpha, beta, indexing="ij")
    P = a + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    if batched:
        vals = np.asarray(loss_fn(P), dtype=np.float64)
    else:
        vals = np.array([float(loss_fn(p)) for p in P])
    return ProjectionGrid(alpha, beta, vals.reshape(resolution, resolution), anchors)


def network_loss_fn(arch, data, loss="tau_hinge", tau=1.0, chunk=256):
    """Batched loss over flat parameter vectors, for :func:`plane_projection_grid`."""
    target = data.target(loss)

    def fn(P):
        P = np.atleast_2d(P)
        out = []
        for start in range(0, len(P), chunk):
            block = P[start:start + chunk]
            layers, k = [], 0
            for s in arch.shapes:
                m = int(np.prod(s))
                layers.append(block[:, k:k + m].reshape((len(block),) + s))
                k += m
            o, _ = forward(layers, data.x, arch.scale)
            out.append(loss_and_grad(o, target, loss, tau)[0])
        return np.concatenate(out)

    return fn


def convexity_violation_metric(grid, pairs=10_000, seed=0, tol=1e-9) -> float:
    """Fraction of random node pairs whose midpoint lies above the chord by more than ``tol``.

    Pairs are drawn with matching index parity so the midpoint is itself a
    grid node.
    """
    F = grid.loss if isinstance(grid, ProjectionGrid) else np.asarray(grid, dtype=np.float64)
    if F.ndim != 2 or min(F.shape) < 2:
        raise ArgumentError("need a 2-D grid with at least 2 nodes per axis")
    rng = np.random.default_rng(seed)
    n0, n1 = F.shape
    i1 = rng.integers(0, n0, pairs)
    j1 = rng.integers(0, n1, pairs)
    # same parity: pick the partner among nodes congruent mod 2
    i2 = (i1 % 2) + 2 * rng.integers(0, (n0 - i1 % 2 + 1) // 2, pairs)
    j2 = (j1 % 2) + 2 * rng.integers(0, (n1 - j1 % 2 + 1) // 2, pairs)
    mid = F[(i1 + i2) // 2, (j1 + j2) // 2]
    chord = 0.5 * (F[i1, j1] + F[i2, j2])
    return float(np.mean(mid > chord + tol))


# -- experiments -------------------------------------------------------------

@dataclass
class LandscapeResult:
    I: int
    grid: ProjectionGrid
    violation: float
    anchor_losses: np.ndarray
    train: TrainResult = field(repr=False)


def landscape_experiment(I, data, seeds=(0, 1, 2), iters=5000, lr=0.05, batch=32, loss="tau_hinge",
                         tau=1.0, resolution=41, master_seed=0, pairs=10_000):
    """Train three seeds of a width-``I`` one-hidden-layer net and slice the loss through them."""
    if len(seeds) != 3:
        raise ArgumentError("the plane needs exactly three seeds")
    classes = data.t.shape[1] if data.t.ndim == 2 else 1
    arch = one_hidden_layer(data.x.shape[1], I, classes)
    res = sgd_train(arch, data, loss, seeds, iters, lr, batch, tau, master_seed)
    thetas = [np.concatenate([W[s].ravel() for W in res.layers]) for s in range(3)]
    fn = network_loss_fn(arch, data, loss, tau)
    grid = plane_projection_grid(*thetas, fn, resolution, batched=True)
    return LandscapeResult(I, grid, convexity_violation_metric(grid, pairs), res.final_loss, res)


@dataclass
class HittingRateRow:
    width: int
    hits: int
    seeds: int

    @property
    def rate(self):
        return self.hits / self.seeds


def hitting_rate_experiment(widths, data, seeds=100, tol=1e-4, iters=20_000, lr=0.05, batch=32,
                            loss="squared", tau=1.0, master_seed=0, chunk=100):
    """Count seeds whose final full-data loss is at most ``tol`` (global minimum is 0)."""
    if seeds < 1:
        raise ArgumentError("seeds must be at least 1")
    rows = []
    for width in widths:
        arch = one_hidden_layer(data.x.shape[1], int(width))
        hits = 0
        for start in range(0, seeds, chunk):
            trial = list(range(start, min(seeds, start + chunk)))
            res = sgd_train(arch, data, loss, trial, iters, lr, batch, tau, master_seed, record_every=0)
            hits += int(np.sum((res.final_loss <= tol) & ~res.failed))
        rows.append(HittingRateRow(int(width), hits, seeds))
    return rows


def hitting_rate_csv(rows) -> str:
    return "width,hits,seeds\n" + "".join(f"{r.width},{r.hits},{r.seeds}\n" for r in rows)
