"""Numeric kernels: non-negative least squares, SVD rank scan, fit diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConvergenceError, NumericError

__all__ = [
    "RankScan",
    "FitDiagnostics",
    "nnls",
    "nnls_gram",
    "svd_scan",
    "fit_diagnostics",
    "blocked_sum_sq",
    "svd_denoise",
]

KKT_REL_TOL = 1e-10
SUM_BLOCK_ROWS = 4096
SVD_MAX_VALUES = 50


def _finite_matrix(a: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def _step_ratios(x: NDArray, z: NDArray) -> NDArray:
    denom = x - z
    out = np.zeros_like(x)
    np.divide(x, denom, out=out, where=denom > 0.0)
    return out


class _LawsonHanson:
    """Active-set iteration state; ``run`` may be resumed with a tighter tolerance."""

    def __init__(self, A: NDArray, b: NDArray) -> None:
        self.A, self.b = A, b
        n = A.shape[1]
        self.x = np.zeros(n)
        self.passive = np.zeros(n, dtype=bool)
        self.blocked = np.zeros(n, dtype=bool)

    def run(self, tol: float, max_iter: int) -> bool:
        """Iterate until no gradient entry exceeds ``tol``; False if the budget runs out."""
        A, b, n = self.A, self.b, self.A.shape[1]
        x, passive, blocked = self.x, self.passive, self.blocked
        w = A.T @ (b - A @ x)
        it = 0
        while True:
            cand = ~passive & ~blocked & (w > tol)
            if not cand.any():
                self.x = x
                return True
            if it >= max_iter:
                self.x = x
                return False
            it += 1
            j = int(np.argmax(np.where(cand, w, -np.inf)))
            passive[j] = True
            x_before = x.copy()
            first = True
            while True:
                idx = np.flatnonzero(passive)
                z = np.zeros(n)
                z[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
                neg = passive & (z <= 0.0)
                if not neg.any():
                    x = z
                    break
                if first and np.array_equal(np.flatnonzero(neg), [j]):
                    # rounding made the entering variable non-positive; skip it
                    passive[j] = False
                    blocked[j] = True
                    break
                first = False
                ratios = _step_ratios(x[neg], z[neg])
                k = int(np.argmin(ratios))
                alpha = ratios[k]
                x = x + alpha * (z - x)
                x[np.flatnonzero(neg)[k]] = 0.0
                passive &= x > 0.0
                x[~passive] = 0.0
            if not np.array_equal(x, x_before):
                blocked[:] = False
            w = A.T @ (b - A @ x)


def nnls(A: ArrayLike, b: ArrayLike) -> tuple[NDArray[np.float64], float]:
    """Solve ``argmin_x ||Ax - b||_2`` subject to ``x >= 0``.

    Lawson-Hanson active-set method. The unconstrained subproblem on the
    passive set is solved with an SVD-based least-squares call on the columns
    of ``A`` directly, which keeps ill-conditioned kernels (inverse Laplace)
    accurate.

    Parameters
    ----------
    A : (m, n) array
    b : (m,) array

    Returns
    -------
    x : (n,) ndarray
        Non-negative solution; inactive entries are exactly zero.
    rnorm : float
        ``||Ax - b||_2``.

    Raises
    ------
    NumericError
        Non-finite input.
    ConvergenceError
        More than ``3n`` outer iterations.
    """
    A = _finite_matrix(A, "A")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ValueError(f"b must be 1D, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise NumericError("b contains non-finite values")
    m, n = A.shape
    if m < 1 or n < 1:
        raise ValueError("A must have at least one row and one column")
    if b.shape[0] != m:
        raise ValueError(f"incompatible dimensions: A is {A.shape}, b has {b.shape[0]}")

    x = np.zeros(n)
    gram_norm = np.linalg.norm(A, 2) ** 2
    if gram_norm == 0.0:
        return x, float(np.linalg.norm(b))
    kkt_tol = KKT_REL_TOL * gram_norm
    # Rounding floor of the gradient. On ill-conditioned kernels the KKT
    # tolerance alone leaves residual along small singular directions, so a
    # KKT-optimal point is refined towards this floor on a separate budget.
    floor = 10.0 * max(m, n) * np.finfo(float).eps * math.sqrt(gram_norm) * float(np.linalg.norm(b))

    state = _LawsonHanson(A, b)
    if not state.run(kkt_tol, 3 * n):
        raise ConvergenceError(f"nnls exceeded {3 * n} iterations")
    if floor < kkt_tol:
        x_kkt = state.x.copy()
        if not state.run(floor, 3 * n):
            state.x = x_kkt
    x = state.x
    return x, float(np.linalg.norm(b - A @ x))


def _solve_passive(G: NDArray, H: NDArray, P: NDArray) -> NDArray:
    """Solve ``G[p,p] z_p = H[p]`` column by column, grouped by passive pattern."""
    n, r = H.shape
    Z = np.zeros((n, r))
    codes = P.T.astype(np.int64) @ (np.int64(1) << np.arange(n, dtype=np.int64))
    for code in np.unique(codes):
        cols = np.flatnonzero(codes == code)
        idx = np.flatnonzero(P[:, cols[0]])
        if idx.size == 0:
            continue
        Gp = G[np.ix_(idx, idx)]
        Hp = H[np.ix_(idx, cols)]
        try:
            sol = np.linalg.solve(Gp, Hp)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(Gp, Hp, rcond=None)[0]
        Z[np.ix_(idx, cols)] = sol
    return Z


def nnls_gram(G: ArrayLike, H: ArrayLike) -> NDArray[np.float64]:
    """Many-right-hand-side NNLS from normal equations.

    Solves ``min ||A x_c - b_c||`` with ``x_c >= 0`` for every column ``c``
    given only ``G = A^T A`` and ``H = A^T B``. Lawson-Hanson run on all
    columns at once; columns sharing a passive set share one factorization
    (the fast combinatorial variant). Each column's iterates are the same as
    a lone Lawson-Hanson run, so results do not depend on which other
    columns are in the batch.

    Returns ``X`` of shape ``(n, r)``.
    """
    G = _finite_matrix(G, "G")
    H = _finite_matrix(H, "H")
    n, r = H.shape
    if G.shape != (n, n):
        raise ValueError(f"G must be ({n}, {n}), got {G.shape}")
    if n > 62:
        raise ValueError("nnls_gram supports at most 62 unknowns")
    X = np.zeros((n, r))
    gnorm = np.linalg.norm(G, 2)
    if gnorm == 0.0 or r == 0:
        return X
    tol = KKT_REL_TOL * gnorm
    max_iter = 3 * n

    P = np.zeros((n, r), dtype=bool)
    blocked = np.zeros((n, r), dtype=bool)
    iters = np.zeros(r, dtype=np.int64)
    W = H.copy()
    cols = np.flatnonzero((W > tol).any(axis=0))
    while cols.size:
        if np.any(iters[cols] >= max_iter):
            raise ConvergenceError(f"nnls exceeded {max_iter} iterations")
        iters[cols] += 1
        Wc = np.where(~P[:, cols] & ~blocked[:, cols], W[:, cols], -np.inf)
        enter = np.argmax(Wc, axis=0)
        P[enter, cols] = True
        X_before = X[:, cols].copy()

        inner = cols.copy()
        first = np.ones(cols.size, dtype=bool)
        pos = np.arange(cols.size)
        while inner.size:
            Z = _solve_passive(G, H[:, inner], P[:, inner])
            neg = P[:, inner] & (Z <= 0.0)
            bad = neg.any(axis=0)
            ok = ~bad
            X[:, inner[ok]] = Z[:, ok]
            if not bad.any():
                break
            # entering variable rejected on the first pass: block it for now
            only_enter = np.zeros(inner.size, dtype=bool)
            for t in np.flatnonzero(bad & first[pos]):
                nz = np.flatnonzero(neg[:, t])
                if nz.size == 1 and nz[0] == enter[pos[t]]:
                    only_enter[t] = True
            for t in np.flatnonzero(only_enter):
                c = inner[t]
                P[enter[pos[t]], c] = False
                blocked[enter[pos[t]], c] = True
            step = bad & ~only_enter
            for t in np.flatnonzero(step):
                c = inner[t]
                nz = np.flatnonzero(neg[:, t])
                xc = X[:, c]
                ratios = _step_ratios(xc[nz], Z[nz, t])
                k = int(np.argmin(ratios))
                xc = xc + ratios[k] * (Z[:, t] - xc)
                xc[nz[k]] = 0.0
                P[:, c] &= xc > 0.0
                xc[~P[:, c]] = 0.0
                X[:, c] = xc
            first[pos] = False
            inner = inner[step]
            pos = pos[step]

        changed = np.any(X[:, cols] != X_before, axis=0)
        blocked[:, cols[changed]] = False
        W[:, cols] = H[:, cols] - G @ X[:, cols]
        cand = ~P[:, cols] & ~blocked[:, cols] & (W[:, cols] > tol)
        cols = cols[cand.any(axis=0)]
    return X


def blocked_sum_sq(E: ArrayLike, block_rows: int = SUM_BLOCK_ROWS) -> float:
    """Sum of squares with a fixed row-block reduction order."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 1:
        E = E[:, None]
    totals = [
        float(np.sum(E[i : i + block_rows] ** 2)) for i in range(0, E.shape[0], block_rows)
    ]
    return float(np.sum(np.asarray(totals))) if totals else 0.0


@dataclass(frozen=True)
class RankScan:
    singular_values: NDArray[np.float64]
    suggested_rank: int
    noise_floor: float

    def to_csv(self) -> str:
        lines = ["index,singular_value"]
        lines += [f"{i + 1},{s:.17g}" for i, s in enumerate(self.singular_values)]
        return "\n".join(lines) + "\n"


def svd_scan(D: ArrayLike) -> RankScan:
    """Singular value scree with an advisory rank suggestion.

    The noise floor is the median of the trailing half of the returned
    singular values; the suggestion counts values above twice that floor.
    Values below the numerical-rank cutoff ``eps * max(m, n) * s_max`` never
    count, so exactly low-rank matrices are not inflated by rounding noise.
    """
    D = _finite_matrix(D, "D")
    m, n = D.shape
    if m < 1 or n < 1:
        raise ValueError("D must have both dimensions >= 1")
    if min(m, n) <= SVD_MAX_VALUES:
        s = np.linalg.svd(D, compute_uv=False)
    else:
        from scipy.sparse.linalg import svds

        s = svds(D, k=SVD_MAX_VALUES, return_singular_vectors=False, random_state=0)
        s = np.sort(s)[::-1]
    s = np.clip(s, 0.0, None)
    if s[0] == 0.0:
        raise NumericError("zero matrix has no rank suggestion")
    floor = float(np.median(s[len(s) // 2 :]))
    cutoff = max(2.0 * floor, np.finfo(float).eps * max(m, n) * s[0])
    rank = int(np.count_nonzero(s > cutoff))
    rank = min(max(rank, 1), min(m, n))
    return RankScan(singular_values=s, suggested_rank=rank, noise_floor=floor)


@dataclass(frozen=True)
class FitDiagnostics:
    explained_variance_pct: float
    lack_of_fit_pct: float
    sum_sq_data: float
    sum_sq_residual: float

    @classmethod
    def from_sums(cls, sum_sq_data: float, sum_sq_residual: float) -> "FitDiagnostics":
        if sum_sq_data <= 0.0:
            raise NumericError("data matrix has zero energy")
        ratio = sum_sq_residual / sum_sq_data
        return cls(
            explained_variance_pct=100.0 * (1.0 - ratio),
            lack_of_fit_pct=100.0 * math.sqrt(ratio),
            sum_sq_data=float(sum_sq_data),
            sum_sq_residual=float(sum_sq_residual),
        )

    def to_dict(self) -> dict:
        return {
            "explained_variance_pct": self.explained_variance_pct,
            "lack_of_fit_pct": self.lack_of_fit_pct,
            "sum_sq_data": self.sum_sq_data,
            "sum_sq_residual": self.sum_sq_residual,
        }


def fit_diagnostics(D: ArrayLike, C: ArrayLike, S: ArrayLike) -> FitDiagnostics:
    """Explained variance and lack of fit of ``D ~ C S^T`` over the whole matrix."""
    D = _finite_matrix(D, "D")
    C = _finite_matrix(C, "C")
    S = _finite_matrix(S, "S")
    m, t = D.shape
    if C.shape[0] != m or S.shape[0] != t or C.shape[1] != S.shape[1]:
        raise ValueError(f"shape mismatch: D {D.shape}, C {C.shape}, S {S.shape}")
    E = D - C @ S.T
    return FitDiagnostics.from_sums(blocked_sum_sq(D), blocked_sum_sq(E))


def svd_denoise(D: ArrayLike, rank: int) -> NDArray[np.float64]:
    """Best rank-``rank`` approximation of ``D`` (truncated SVD reconstruction)."""
    D = _finite_matrix(D, "D")
    if not 1 <= rank <= min(D.shape):
        raise ValueError(f"rank {rank} must lie in [1, {min(D.shape)}]")
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    return (U[:, :rank] * s[:rank]) @ Vt[:rank]
