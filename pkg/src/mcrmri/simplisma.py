"""Pure-pixel selection (SIMPLISMA) for initial spectral estimates.

Purity is evaluated over the rows of ``D`` (pixels): every echo channel mixes
all relaxation pools, whereas pixels in the bath or in a single hydration
zone can be close to pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigError, NumericError

DET_FLOOR = 1e-12


@dataclass(frozen=True)
class PuritySelection:
    selected_rows: tuple[int, ...]
    purity_values: tuple[float, ...]
    offset_fraction: float


def simplisma_init(
    D: ArrayLike, k: int, offset_fraction: float = 0.05
) -> tuple[NDArray[np.float64], PuritySelection]:
    """Pick ``k`` pure rows of ``D`` and return their unit-norm decay curves.

    Parameters
    ----------
    D : (m, t) array
        Pixels x echoes.
    k : int
        Number of components.
    offset_fraction : float
        Offset ``alpha`` as a fraction of the largest row mean.

    Returns
    -------
    S0 : (t, k) ndarray
        Column ``i`` is row ``selected_rows[i]`` of ``D`` scaled to unit norm.
    selection : PuritySelection
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ConfigError("D must be a matrix")
    m, t = D.shape
    if k < 1 or k > min(m, t):
        raise ConfigError(f"component count {k} must lie in [1, {min(m, t)}]")
    if not offset_fraction > 0:
        raise ConfigError("offset_fraction must be positive")

    mu = D.mean(axis=1)
    sigma = D.std(axis=1)
    alpha = offset_fraction * float(mu.max())
    if alpha <= 0:
        raise NumericError("row means are all non-positive; purity is undefined")
    denom = mu + alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        purity = np.where(denom > 0, sigma / denom, 0.0)
    # rows scaled to the correlation-around-origin convention
    lam = np.sqrt(sigma**2 + denom**2)
    Y = D / lam[:, None]
    diag = np.einsum("ij,ij->i", Y, Y) / t

    selected: list[int] = []
    purities: list[float] = []
    for step in range(k):
        if step == 0:
            weight = np.ones(m)
        else:
            sel = np.asarray(selected)
            base = (Y[sel] @ Y[sel].T) / t
            cross = (Y @ Y[sel].T) / t  # (m, p)
            p = sel.size
            mats = np.empty((m, p + 1, p + 1))
            mats[:, :p, :p] = base
            mats[:, :p, p] = cross
            mats[:, p, :p] = cross
            mats[:, p, p] = diag
            weight = np.linalg.det(mats)
            weight[sel] = 0.0
            if not np.any(weight > DET_FLOOR):
                raise NumericError("insufficient distinct pure variables")
            weight = np.where(weight > DET_FLOOR, weight, 0.0)
        score = weight * purity
        best = int(np.argmax(score))  # first index wins ties
        if score[best] <= 0:
            raise NumericError("insufficient distinct pure variables")
        selected.append(best)
        purities.append(float(score[best]))

    S0 = D[selected].T.copy()
    norms = np.linalg.norm(S0, axis=0)
    if np.any(norms == 0):
        raise NumericError("selected pure row is all zeros")
    S0 /= norms
    return S0, PuritySelection(tuple(selected), tuple(purities), float(offset_fraction))
