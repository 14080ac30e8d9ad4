"""Kernel evaluation, Gram assembly, ridge solves and pivoted Gram-Schmidt.

Point sets are ``(n, d)`` arrays; 1-D inputs are read as ``n`` scalar points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

__all__ = [
    "KernelSpec",
    "LowRankFactor",
    "FactorizationError",
    "as_points",
    "eval_kernel",
    "gram",
    "median_heuristic",
    "regularized_solve",
    "RidgeFactor",
    "incomplete_gram_schmidt",
]

FAMILIES = ("squared-exponential",)


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a regularized Gram matrix is not positive definite."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(f"{message} (min eigenvalue estimate {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel ``exp(-|x - y|^2 / bandwidth)``.

    ``bandwidth`` is a squared length scale, in squared state units.
    """

    bandwidth: float
    family: str = "squared-exponential"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    def to_dict(self) -> dict:
        return {"family": self.family, "bandwidth": float(self.bandwidth)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(bandwidth=float(d["bandwidth"]), family=d.get("family", FAMILIES[0]))


def as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"point set must be at most 2-D, got shape {a.shape}")
    return a


def eval_kernel(k: KernelSpec, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(np.exp(-np.sum((x - y) ** 2) / k.bandwidth))


def gram(k: KernelSpec, A, B=None) -> np.ndarray:
    """Gram matrix ``G[i, j] = k(a_i, b_j)``.

    Distances are formed entrywise (no norm expansion), so ``gram(k, A, A)``
    is exactly symmetric with a unit diagonal.
    """
    A = as_points(A)
    B = A if B is None else as_points(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("empty point set")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    d2 = cdist(A, B, "sqeuclidean")
    d2 /= -k.bandwidth
    return np.exp(d2, out=d2)


def median_heuristic(points, max_points: int = 2000) -> float:
    """Median pairwise squared Euclidean distance.

    Sets larger than ``max_points`` are thinned by a fixed stride, which keeps
    the result deterministic.
    """
    X = as_points(points)
    if X.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    if X.shape[0] > max_points:
        X = X[:: int(np.ceil(X.shape[0] / max_points))]
    iu = np.triu_indices(X.shape[0], k=1)
    d2 = cdist(X, X, "sqeuclidean")[iu]
    med = float(np.median(d2))
    if med <= 0:
        raise ValueError("median squared distance is zero (points identical)")
    return med


def _min_eig(M: np.ndarray) -> float:
    return float(linalg.eigvalsh(M, subset_by_index=[0, 0])[0])


class RidgeFactor:
    """Cholesky factor of ``G + ridge * I``, reusable across right-hand sides."""

    def __init__(self, G: np.ndarray, ridge: float):
        G = np.asarray(G, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(f"Gram matrix must be square, got {G.shape}")
        if not ridge > 0:
            raise ValueError(f"ridge must be positive, got {ridge}")
        self.n = G.shape[0]
        self.ridge = float(ridge)
        M = G + ridge * np.eye(self.n)
        try:
            self._cho = linalg.cho_factor(M, lower=True, check_finite=True)
        except linalg.LinAlgError:
            raise FactorizationError(
                "regularized Gram matrix is not positive definite", _min_eig(M)
            ) from None

    def solve(self, R) -> np.ndarray:
        return linalg.cho_solve(self._cho, np.asarray(R, dtype=float), check_finite=False)


def regularized_solve(G, R, ridge: float) -> np.ndarray:
    """Return ``(G + ridge I)^{-1} R`` through a Cholesky factorization."""
    return RidgeFactor(G, ridge).solve(R)


@dataclass
class LowRankFactor:
    """Pivoted Gram-Schmidt factor: ``G_XX ~= L L^T = W^T G_YY W``.

    ``pivots`` index the retained points ``Y`` in ``X``; ``L`` is ``(m, r)`` and
    lower triangular on the pivot rows.
    """

    pivots: np.ndarray
    L: np.ndarray
    residual_trace: float

    @property
    def rank(self) -> int:
        return len(self.pivots)

    @property
    def L_pivot(self) -> np.ndarray:
        return self.L[self.pivots]

    @property
    def weights(self) -> np.ndarray:
        """``W_x`` (``r x m``) with ``g_X ~= g_Y W_x``."""
        return linalg.solve_triangular(self.L_pivot, self.L.T, lower=True, trans="T")

    def reconstruct(self) -> np.ndarray:
        return self.L @ self.L.T


def incomplete_gram_schmidt(
    k: KernelSpec, X, max_rank: int, tol: float = 0.0, floor: float = 1e-12
) -> LowRankFactor:
    """Greedy pivoted Cholesky (incomplete Gram-Schmidt) of ``gram(k, X, X)``.

    Each step takes the point with the largest residual diagonal (lowest index
    on ties) and stops once the residual trace drops below ``tol`` or every
    residual diagonal is below ``floor`` times the largest kernel diagonal.
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    X = as_points(X)
    m = X.shape[0]
    r_max = min(int(max_rank), m)
    d = np.ones(m)  # squared-exponential kernels have k(x, x) = 1
    L = np.zeros((m, r_max))
    pivots: list[int] = []
    stop_below = floor * d.max()
    for r in range(r_max):
        if d.sum() < tol or d.max() <= stop_below:
            break
        j = int(np.argmax(d))
        pivots.append(j)
        col = gram(k, X, X[j : j + 1])[:, 0]
        if r:
            col -= L[:, :r] @ L[j, :r]
        col /= np.sqrt(d[j])
        col[pivots[:-1]] = 0.0
        L[:, r] = col
        d -= col**2
        d[j] = 0.0
        np.maximum(d, 0.0, out=d)
    r = len(pivots)
    return LowRankFactor(pivots=np.asarray(pivots, dtype=int), L=L[:, :r].copy(), residual_trace=float(d.sum()))
