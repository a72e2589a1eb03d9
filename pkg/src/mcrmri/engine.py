"""Constrained MCR-ALS on an augmented (multiset) matrix."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cubeio import MultisetStack
from .errors import ConfigError, NumericError
from .ilt import FixedLambda, IltParams, shape_project
from .numkit import FitDiagnostics, blocked_sum_sq, nnls_gram

log = logging.getLogger(__name__)

__all__ = [
    "ConstraintSpec",
    "AlsOptions",
    "DecompositionResult",
    "als_fit",
    "als_decompose",
    "split_concentrations",
    "match_components",
    "cosine_similarity",
]

CONVERGED = "converged"
MAX_ITER = "max_iter"
DIVERGED = "diverged"

# Lack of fit (percent) at which the residual is rounding noise; relative
# changes below this level carry no information, so the fit counts as converged.
LOF_FLOOR_PCT = 1e-10


def _default_projection() -> IltParams:
    return IltParams(lambda_policy=FixedLambda(1e-4, relative=True))


@dataclass(frozen=True)
class ConstraintSpec:
    nonneg_C: bool = True
    nonneg_S: bool = True
    normalize_S: str = "euclidean"
    shape_decay: tuple[bool, ...] = ()
    ilt_projection: IltParams = field(default_factory=_default_projection)

    def __post_init__(self) -> None:
        if self.normalize_S not in ("euclidean", "none"):
            raise ConfigError(f"normalize_S must be 'euclidean' or 'none', got {self.normalize_S!r}")
        object.__setattr__(self, "shape_decay", tuple(bool(f) for f in self.shape_decay))

    def flags_for(self, k: int) -> tuple[bool, ...]:
        """Per-component shape flags; an empty tuple means none are constrained."""
        if not self.shape_decay:
            return (False,) * k
        if len(self.shape_decay) != k:
            raise ConfigError(f"shape_decay has {len(self.shape_decay)} flags for {k} components")
        return self.shape_decay

    def to_dict(self) -> dict:
        return {
            "nonneg_C": self.nonneg_C,
            "nonneg_S": self.nonneg_S,
            "normalize_S": self.normalize_S,
            "shape_decay": list(self.shape_decay),
            "ilt_projection": self.ilt_projection.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        d = dict(d)
        proj = d.pop("ilt_projection", None)
        d["shape_decay"] = tuple(d.get("shape_decay", ()))
        return cls(**d, ilt_projection=IltParams.from_dict(proj) if proj else _default_projection())


@dataclass(frozen=True)
class AlsOptions:
    max_iterations: int = 100
    lof_rel_tol_pct: float = 0.1
    divergence_patience: int = 20
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.divergence_patience < 1 or self.threads < 1:
            raise ConfigError("ALS options must be positive")
        if not self.lof_rel_tol_pct > 0:
            raise ConfigError("lof_rel_tol_pct must be positive")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "lof_rel_tol_pct": self.lof_rel_tol_pct,
            "divergence_patience": self.divergence_patience,
            "seed": self.seed,
            "threads": self.threads,
        }


@dataclass(frozen=True, eq=False)
class DecompositionResult:
    C_aug: NDArray[np.float64]
    S: NDArray[np.float64]
    diagnostics: FitDiagnostics
    lof_trace: tuple[float, ...]
    status: str
    constraints: ConstraintSpec
    block_offsets: tuple[int, ...]
    best_iteration: int

    @property
    def n_components(self) -> int:
        return self.S.shape[1]

    @property
    def n_iterations(self) -> int:
        return len(self.lof_trace)


def _chunks(n: int, parts: int) -> list[slice]:
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _solve_rows(
    A: NDArray, B: NDArray, nonneg: bool, pool: ThreadPoolExecutor | None = None, parts: int = 1
) -> NDArray:
    """Least-squares ``X`` with ``A @ X[:, c] ~ B[:, c]`` for each column ``c``."""
    if not nonneg:
        return np.linalg.lstsq(A, B, rcond=None)[0]
    G = A.T @ A
    if pool is None:
        return nnls_gram(G, A.T @ B)
    out = list(pool.map(lambda sl: nnls_gram(G, A.T @ B[:, sl]), _chunks(B.shape[1], parts)))
    return np.hstack(out)


def _lof(D: NDArray, C: NDArray, S: NDArray, ss_data: float) -> float:
    return 100.0 * np.sqrt(blocked_sum_sq(D - C @ S.T) / ss_data)


def als_fit(
    D: ArrayLike,
    S0: ArrayLike,
    constraints: ConstraintSpec | None = None,
    opts: AlsOptions | None = None,
    *,
    echo_times_ms: ArrayLike | None = None,
    block_offsets: tuple[int, ...] = (0,),
) -> DecompositionResult:
    """Alternating least squares ``D ~ C S^T`` starting from spectra ``S0``.

    Each iteration solves C given S, then S given C (row-wise NNLS when the
    matching non-negativity flag is on), projects shape-flagged spectra onto
    non-negative exponential mixtures, and moves the Euclidean norm of each
    spectrum into C. The iterate with the lowest lack of fit is returned.
    """
    constraints = constraints or ConstraintSpec()
    opts = opts or AlsOptions()
    D = np.asarray(D, dtype=np.float64)
    S = np.array(S0, dtype=np.float64)
    if D.ndim != 2 or S.ndim != 2 or S.shape[0] != D.shape[1]:
        raise ConfigError(f"S0 must be (n_echoes, k); got {S.shape} for data {D.shape}")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(S))):
        raise NumericError("non-finite values in data or initial spectra")
    n_echoes, k = S.shape
    if k > n_echoes:
        raise ConfigError(f"{k} components exceed {n_echoes} echoes")
    if np.any(~S.any(axis=0)):
        raise NumericError("initial spectra are rank deficient: a column is all zeros")
    flags = constraints.flags_for(k)
    if any(flags) and echo_times_ms is None:
        raise ConfigError("shape constraint needs echo times")

    ss_data = blocked_sum_sq(D)
    if ss_data == 0.0:
        raise NumericError("data matrix has zero energy")

    pool = ThreadPoolExecutor(opts.threads) if opts.threads > 1 else None
    trace: list[float] = []
    best: tuple[float, NDArray, NDArray, int] | None = None
    status = MAX_ITER
    increases = 0
    try:
        for it in range(opts.max_iterations):
            C = _solve_rows(S, D.T, constraints.nonneg_C, pool, opts.threads).T
            S = _solve_rows(C, D, constraints.nonneg_S).T
            for j in np.flatnonzero(flags):
                S[:, j] = shape_project(S[:, j], echo_times_ms, constraints.ilt_projection)
            if constraints.normalize_S == "euclidean":
                norms = np.linalg.norm(S, axis=0)
                ok = norms > 0
                S[:, ok] /= norms[ok]
                C[:, ok] *= norms[ok]
            lof = _lof(D, C, S, ss_data)
            trace.append(lof)
            if best is None or lof < best[0]:
                best = (lof, C.copy(), S.copy(), it)
            if lof <= LOF_FLOOR_PCT:
                status = CONVERGED
                break
            if it == 0:
                continue
            prev = trace[-2]
            increases = increases + 1 if lof > prev else 0
            if increases >= opts.divergence_patience:
                status = DIVERGED
                break
            if prev == 0.0 or abs(prev - lof) / prev * 100.0 < opts.lof_rel_tol_pct:
                status = CONVERGED
                break
    finally:
        if pool is not None:
            pool.shutdown()

    assert best is not None
    _, C, S, best_it = best
    diag = FitDiagnostics.from_sums(ss_data, blocked_sum_sq(D - C @ S.T))
    log.info(
        "ALS %s after %d iterations; EV %.4f%%, lof %.4f%%",
        status, len(trace), diag.explained_variance_pct, diag.lack_of_fit_pct,
    )
    return DecompositionResult(
        C_aug=C,
        S=S,
        diagnostics=diag,
        lof_trace=tuple(trace),
        status=status,
        constraints=constraints,
        block_offsets=tuple(block_offsets),
        best_iteration=best_it,
    )


def als_decompose(
    stack: MultisetStack,
    S0: ArrayLike,
    constraints: ConstraintSpec | None = None,
    opts: AlsOptions | None = None,
) -> DecompositionResult:
    """Decompose the augmented matrix of a multiset with one shared ``S``."""
    return als_fit(
        stack.augmented(),
        S0,
        constraints,
        opts,
        echo_times_ms=stack.echo_times_ms,
        block_offsets=stack.row_offsets,
    )


def split_concentrations(
    result: DecompositionResult, stack: MultisetStack
) -> list[NDArray[np.float64]]:
    if tuple(result.block_offsets) != tuple(stack.row_offsets):
        raise NumericError("result block offsets do not match the multiset")
    if result.C_aug.shape[0] != stack.n_rows:
        raise NumericError("C_aug row count does not match the multiset")
    return [result.C_aug[sl] for sl in stack.block_slices()]


def cosine_similarity(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Column-by-column cosine matrix, shape ``(a.shape[1], b.shape[1])``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.linalg.norm(a, axis=0)
    bn = b / np.linalg.norm(b, axis=0)
    return an.T @ bn


def match_components(S_est: ArrayLike, S_ref: ArrayLike) -> tuple[NDArray[np.int64], NDArray]:
    """Assignment of reference columns to estimated columns maximising summed cosine.

    Returns ``perm`` such that ``S_est[:, perm[i]]`` pairs with ``S_ref[:, i]``,
    and the matched cosines.
    """
    from scipy.optimize import linear_sum_assignment

    cos = cosine_similarity(S_ref, S_est)
    rows, cols = linear_sum_assignment(-cos)
    perm = np.empty(cos.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, cos[rows, cols]
