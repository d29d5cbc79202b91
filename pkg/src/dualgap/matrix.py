"""Deterministic dense linear algebra used throughout the package.

Matrices are plain 2-D ``float64`` numpy arrays. Every public function
validates its input with :func:`as_matrix`, so NaN/Inf never get past the
boundary of this module.
"""

from __future__ import annotations

import csv
import io
import json
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, NumericalFailure

#: singular values at or below ``RANK_RTOL * sigma_1`` count as zero
RANK_RTOL = 1e-10


class SvdResult(NamedTuple):
    """Thin SVD ``M = U @ diag(s) @ V.T`` with a fixed sign convention.

    ``rank`` counts singular values strictly above ``RANK_RTOL * s[0]``.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    rank: int

    def skinny(self):
        """Return ``(U, s, V)`` restricted to the numerically non-zero triples."""
        r = self.rank
        return self.U[:, :r], self.s[:r], self.V[:, :r]


def as_matrix(M, name="matrix") -> np.ndarray:
    """Coerce to a finite 2-D float array (scalars and vectors are rejected)."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ArgumentError(f"{name} has non-finite entries")
    return A


def svd(M) -> SvdResult:
    """Thin SVD with deterministic signs.

    In every column of ``U`` the entry of largest magnitude is made
    non-negative (lowest index wins ties) and the matching column of ``V``
    is flipped along with it.
    """
    A = as_matrix(M)
    k = min(A.shape)
    if k == 0:
        return SvdResult(np.zeros((A.shape[0], 0)), np.zeros(0), np.zeros((A.shape[1], 0)), 0)
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    V = Vt.T.copy()
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(k)] < 0, -1.0, 1.0)
    U = U * signs
    V = V * signs
    rank = int(np.count_nonzero(s > RANK_RTOL * s[0])) if s[0] > 0 else 0
    return SvdResult(U, s, V, rank)


def singular_values(M) -> np.ndarray:
    return np.linalg.svd(as_matrix(M), compute_uv=False)


def rank(M) -> int:
    return svd(M).rank


def sigma_min_nonzero(M) -> float:
    """Smallest singular value above the rank threshold (``inf`` for a zero matrix)."""
    res = svd(M)
    if res.rank == 0:
        return float("inf")
    return float(res.s[res.rank - 1])


def truncated_svd(M, r: int) -> np.ndarray:
    """Best rank-``r`` approximation ``U[:, :r] diag(s[:r]) V[:, :r].T``.

    With tied singular values at position ``r`` the result is one of
    several equally good approximations; the sign convention of
    :func:`svd` makes the choice deterministic.
    """
    A = as_matrix(M)
    if not 0 <= r <= min(A.shape):
        raise ArgumentError(f"truncation rank {r} outside [0, {min(A.shape)}]")
    if r == 0:
        return np.zeros_like(A)
    U, s, V, _ = svd(A)
    return (U[:, :r] * s[:r]) @ V[:, :r].T


def pseudo_inverse(M) -> np.ndarray:
    """Moore-Penrose pseudo-inverse using the module rank threshold."""
    A = as_matrix(M)
    U, s, V = svd(A).skinny()
    return (V / s) @ U.T


def schatten_norm(M, H) -> float:
    r"""Schatten-``H`` norm :math:`(\sum_i \sigma_i^H)^{1/H}`.

    ``H = 1`` is the nuclear norm and ``H = 2`` the Frobenius norm.
    """
    if H < 1:
        raise ArgumentError(f"Schatten order must be >= 1, got {H}")
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0.0
    # scale by s[0] so that large H does not overflow
    return float(s[0] * np.sum((s / s[0]) ** H) ** (1.0 / H))


def nuclear_norm(M) -> float:
    return float(np.sum(singular_values(M)))


def spectral_norm(M) -> float:
    s = singular_values(M)
    return float(s[0]) if s.size else 0.0


def dmin_norm_sq(M, d_min: int) -> float:
    """Sum of the ``d_min`` largest squared singular values."""
    s = singular_values(M)
    if not 1 <= d_min <= s.size:
        raise ArgumentError(f"d_min={d_min} outside [1, {s.size}]")
    return float(np.sum(s[:d_min] ** 2))


def row_space_projector(X) -> np.ndarray:
    """Orthogonal projector ``X^+ X`` onto the row space of ``X`` (n x n)."""
    _, _, V = svd(X).skinny()
    return V @ V.T


def row_space_project(M, X) -> np.ndarray:
    """Project the rows of ``M`` onto ``Row(X)``, i.e. ``M X^+ X``."""
    A = as_matrix(M, "M")
    B = as_matrix(X, "X")
    if A.shape[1] != B.shape[1]:
        raise ArgumentError(f"column mismatch: M has {A.shape[1]}, X has {B.shape[1]}")
    _, _, V = svd(B).skinny()
    return (A @ V) @ V.T


def spectral_ball_project(M, gamma: float) -> np.ndarray:
    """Frobenius-nearest point of ``{L : ||L||_2 <= gamma}``: clip singular values at ``gamma``."""
    A = as_matrix(M)
    if gamma < 0:
        raise ArgumentError("gamma must be non-negative")
    if A.size == 0 or spectral_norm(A) <= gamma:
        return A.copy()
    U, s, V, _ = svd(A)
    return (U * np.minimum(s, gamma)) @ V.T


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def matrix_to_csv(M) -> str:
    A = as_matrix(M)
    return "".join(",".join(_fmt(v) for v in row) + "\n" for row in A)


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [[float(v) for v in row] for row in csv.reader(io.StringIO(text)) if row]
    if not rows:
        raise ArgumentError("empty matrix CSV")
    if len({len(r) for r in rows}) != 1:
        raise ArgumentError("ragged matrix CSV")
    return as_matrix(rows)


def matrix_to_dict(M) -> dict:
    A = as_matrix(M)
    return {"rows": A.shape[0], "cols": A.shape[1], "entries": [float(v) for v in A.ravel()]}


def matrix_from_obj(obj) -> np.ndarray:
    """Build a matrix from ``{rows, cols, entries}`` or from a nested list."""
    if isinstance(obj, dict):
        try:
            rows, cols, entries = int(obj["rows"]), int(obj["cols"]), obj["entries"]
        except KeyError as exc:
            raise ArgumentError(f"matrix object missing key {exc}") from None
        if len(entries) != rows * cols:
            raise ArgumentError(f"expected {rows * cols} entries, got {len(entries)}")
        return as_matrix(np.asarray(entries, dtype=np.float64).reshape(rows, cols))
    return as_matrix(obj)


def matrix_to_json(M) -> str:
    return json.dumps(matrix_to_dict(M))


def matrix_from_json(text: str) -> np.ndarray:
    return matrix_from_obj(json.loads(text))
