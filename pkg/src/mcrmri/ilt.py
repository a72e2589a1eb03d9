"""Non-negative Tikhonov inverse Laplace transform for echo-decay curves."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigError, NumericError
from .numkit import nnls

__all__ = [
    "T2Grid",
    "FixedLambda",
    "LCurve",
    "IltParams",
    "RelaxationSpectrum",
    "Peak",
    "build_kernel",
    "ilt_solve",
    "select_lambda",
    "shape_project",
    "peaks",
    "write_spectrum",
]


@dataclass(frozen=True)
class T2Grid:
    t2_min_ms: float = 1.0
    t2_max_ms: float = 1000.0
    n_points: int = 64

    def __post_init__(self) -> None:
        if not 0 < self.t2_min_ms < self.t2_max_ms:
            raise ConfigError("T2 grid needs 0 < t2_min_ms < t2_max_ms")
        if self.n_points < 2:
            raise ConfigError("T2 grid needs at least 2 points")

    @property
    def t2_values_ms(self) -> NDArray[np.float64]:
        return np.geomspace(self.t2_min_ms, self.t2_max_ms, self.n_points)


@dataclass(frozen=True)
class FixedLambda:
    """A fixed regularization weight; ``relative`` scales it by ``||K||_2``."""

    value: float
    relative: bool = False

    def __post_init__(self) -> None:
        if not self.value > 0:
            raise ConfigError("lambda must be positive")


@dataclass(frozen=True)
class LCurve:
    """Log-spaced candidate ladder ``[lo, hi] * ||K||_2``."""

    lo: float = 1e-4
    hi: float = 1e1
    n: int = 25

    def __post_init__(self) -> None:
        if not 0 < self.lo < self.hi:
            raise ConfigError("L-curve bounds need 0 < lo < hi")


LambdaPolicy = Union[FixedLambda, LCurve]


@dataclass(frozen=True)
class IltParams:
    grid: T2Grid = field(default_factory=T2Grid)
    lambda_policy: LambdaPolicy = field(default_factory=LCurve)

    def to_dict(self) -> dict:
        pol = self.lambda_policy
        if isinstance(pol, FixedLambda):
            policy = {"kind": "fixed", "value": pol.value, "relative": pol.relative}
        else:
            policy = {"kind": "lcurve", "lo": pol.lo, "hi": pol.hi, "n": pol.n}
        g = self.grid
        return {
            "grid": {"t2_min_ms": g.t2_min_ms, "t2_max_ms": g.t2_max_ms, "n_points": g.n_points},
            "lambda_policy": policy,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "IltParams":
        if not d:
            return cls()
        grid = T2Grid(**d.get("grid", {}))
        pol = dict(d.get("lambda_policy", {"kind": "lcurve"}))
        kind = pol.pop("kind", "lcurve")
        if kind == "fixed":
            policy: LambdaPolicy = FixedLambda(**pol)
        elif kind == "lcurve":
            policy = LCurve(**pol)
        else:
            raise ConfigError(f"unknown lambda policy {kind!r}")
        return cls(grid=grid, lambda_policy=policy)


@dataclass(frozen=True)
class RelaxationSpectrum:
    t2_ms: NDArray[np.float64]
    amplitudes: NDArray[np.float64]
    lambda_used: float
    residual_norm: float
    signal_scale: float


@dataclass(frozen=True)
class Peak:
    t2_ms: float
    amplitude: float
    fraction_of_total: float


def build_kernel(echo_times_ms: ArrayLike, grid: T2Grid) -> NDArray[np.float64]:
    """``K[m, j] = exp(-t_m / T2_j)``."""
    t = np.asarray(echo_times_ms, dtype=np.float64)
    if t.ndim != 1 or np.any(t <= 0):
        raise ConfigError("echo times must be a 1D vector of positive values")
    if np.any(np.diff(t) <= 0):
        raise ConfigError("echo times must be ascending")
    return np.exp(-t[:, None] / grid.t2_values_ms[None, :])


def _check_signal(signal: ArrayLike, echo_times_ms: ArrayLike) -> NDArray[np.float64]:
    s = np.asarray(signal, dtype=np.float64)
    if s.ndim != 1 or s.shape != np.shape(echo_times_ms):
        raise ConfigError("signal and echo times must be 1D vectors of equal length")
    if not np.all(np.isfinite(s)):
        raise NumericError("signal contains non-finite values")
    return s


def _solve_fixed(
    K: NDArray, s: NDArray, lam: float
) -> tuple[NDArray[np.float64], float, float]:
    """Return (amplitudes, residual norm, signal scale) for one lambda."""
    scale = float(np.max(np.abs(s)))
    if scale == 0.0:
        raise NumericError("empty signal")
    n = K.shape[1]
    A = np.vstack([K, lam * np.eye(n)])
    b = np.concatenate([s / scale, np.zeros(n)])
    x, _ = nnls(A, b)
    x = x * scale
    return x, float(np.linalg.norm(K @ x - s)), scale


def select_lambda(
    signal: ArrayLike, echo_times_ms: ArrayLike, params: IltParams
) -> tuple[float, list[tuple[float, float, float]]]:
    """L-curve corner by maximum discrete curvature.

    Returns the selected lambda and the full curve as
    ``(residual_norm, solution_norm, lambda)`` triples in ascending lambda.
    """
    pol = params.lambda_policy
    if not isinstance(pol, LCurve):
        raise ConfigError("select_lambda needs an L-curve policy")
    if pol.n < 3:
        raise ConfigError("L-curve needs at least 3 candidates")
    s = _check_signal(signal, echo_times_ms)
    K = build_kernel(echo_times_ms, params.grid)
    knorm = np.linalg.norm(K, 2)
    lams = np.geomspace(pol.lo * knorm, pol.hi * knorm, pol.n)
    curve = []
    for lam in lams:
        x, rnorm, _ = _solve_fixed(K, s, lam)
        curve.append((rnorm, float(np.linalg.norm(x)), float(lam)))

    tiny = np.finfo(float).tiny
    pts = np.log(np.array([[max(r, tiny), max(e, tiny)] for r, e, _ in curve]))
    best, best_kappa = 1, -np.inf
    for i in range(1, len(pts) - 1):
        a = pts[i] - pts[i - 1]
        b = pts[i + 1] - pts[i]
        c = pts[i + 1] - pts[i - 1]
        la, lb, lc = np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)
        if la == 0 or lb == 0 or lc == 0:
            kappa = 0.0
        else:
            kappa = 2.0 * (a[0] * b[1] - a[1] * b[0]) / (la * lb * lc)
        if kappa > best_kappa:
            best, best_kappa = i, kappa
    return float(lams[best]), curve


def _resolve_lambda(s: NDArray, echo_times_ms: ArrayLike, K: NDArray, params: IltParams) -> float:
    pol = params.lambda_policy
    if isinstance(pol, FixedLambda):
        return pol.value * np.linalg.norm(K, 2) if pol.relative else pol.value
    lam, _ = select_lambda(s, echo_times_ms, params)
    return lam


def ilt_solve(
    signal: ArrayLike, echo_times_ms: ArrayLike, params: IltParams | None = None
) -> RelaxationSpectrum:
    """Solve ``min ||Kx - s||^2 + lam^2 ||x||^2`` with ``x >= 0``.

    The augmented system ``[K; lam I] x = [s; 0]`` goes to the active-set
    NNLS solver, so the non-negativity is exact.
    """
    params = params or IltParams()
    s = _check_signal(signal, echo_times_ms)
    if not np.any(s):
        raise NumericError("empty signal")
    K = build_kernel(echo_times_ms, params.grid)
    lam = _resolve_lambda(s, echo_times_ms, K, params)
    x, rnorm, scale = _solve_fixed(K, s, lam)
    return RelaxationSpectrum(
        t2_ms=params.grid.t2_values_ms,
        amplitudes=x,
        lambda_used=float(lam),
        residual_norm=rnorm,
        signal_scale=scale,
    )


def shape_project(
    column: ArrayLike, echo_times_ms: ArrayLike, params: IltParams | None = None
) -> NDArray[np.float64]:
    """Nearest non-negative sum of decaying exponentials, ``K @ x``.

    A zero column is returned unchanged.
    """
    params = params or IltParams()
    s = _check_signal(column, echo_times_ms)
    if not np.any(s):
        return s.copy()
    spec = ilt_solve(s, echo_times_ms, params)
    K = build_kernel(echo_times_ms, params.grid)
    return K @ spec.amplitudes


def peaks(spectrum: RelaxationSpectrum) -> list[Peak]:
    """Local maxima of the distribution, largest amplitude first.

    A maximum must exceed both neighbours (edges compare against zero); on a
    plateau the leftmost index counts. The fraction is the mass of the
    contiguous nonzero run holding the maximum over the total mass.
    """
    a = np.asarray(spectrum.amplitudes, dtype=np.float64)
    total = float(a.sum())
    if total <= 0:
        return []
    padded = np.concatenate([[0.0], a, [0.0]])
    found = []
    n = a.size
    i = 0
    while i < n:
        j = i
        while j + 1 < n and a[j + 1] == a[i]:
            j += 1
        left, right = padded[i], padded[j + 2]
        if a[i] > 0 and a[i] > left and a[i] > right:
            lo = i
            while lo > 0 and a[lo - 1] > 0:
                lo -= 1
            hi = j
            while hi < n - 1 and a[hi + 1] > 0:
                hi += 1
            mass = float(a[lo : hi + 1].sum())
            found.append(Peak(float(spectrum.t2_ms[i]), float(a[i]), mass / total))
        i = j + 1
    found.sort(key=lambda p: -p.amplitude)
    return found


def write_spectrum(spectrum: RelaxationSpectrum, csv_path: Union[str, Path]) -> Path:
    """CSV of (t2_ms, amplitude) plus a ``.json`` sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    lines = ["t2_ms,amplitude"]
    lines += [f"{t:.17g},{a:.17g}" for t, a in zip(spectrum.t2_ms, spectrum.amplitudes)]
    csv_path.write_text("\n".join(lines) + "\n")
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(
        json.dumps(
            {
                "lambda_used": spectrum.lambda_used,
                "residual_norm": spectrum.residual_norm,
                "signal_scale": spectrum.signal_scale,
            },
            indent=2,
        )
        + "\n"
    )
    return sidecar
