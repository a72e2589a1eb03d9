"""Distribution maps, global kinetic profiles and radial (local) time series."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cubeio import ForegroundMask, MultisetStack, PathLike, read_pgm, refold, write_pgm
from .engine import DecompositionResult, split_concentrations
from .errors import ConfigError, FormatError

__all__ = [
    "KineticProfile",
    "RadialSeries",
    "distribution_maps",
    "kinetic_profiles",
    "estimate_center",
    "radial_series",
    "export_maps",
    "read_map_csv",
    "read_map_pgm16",
    "write_kinetics_csv",
    "write_radial_csv",
]

PGM16_MAX = 65535


@dataclass(frozen=True, eq=False)
class KineticProfile:
    component_id: int
    times_h: NDArray[np.float64]
    mean_concentration: NDArray[np.float64]

    def __post_init__(self) -> None:
        if len(self.times_h) != len(self.mean_concentration):
            raise ValueError("times and values differ in length")
        if np.any(np.diff(self.times_h) <= 0):
            raise ValueError("times must be strictly increasing")


@dataclass(frozen=True, eq=False)
class RadialSeries:
    """Annulus-mean concentration per frame; frames with no pixels hold NaN."""

    component_id: int
    distance_mm: float
    times_h: NDArray[np.float64]
    values: NDArray[np.float64]
    pixel_counts: NDArray[np.int64]

    def __post_init__(self) -> None:
        if not len(self.times_h) == len(self.values) == len(self.pixel_counts):
            raise ValueError("times, values and pixel counts differ in length")
        if self.distance_mm < 0:
            raise ValueError("distance must be non-negative")


def distribution_maps(
    result: DecompositionResult, stack: MultisetStack
) -> list[NDArray[np.float64]]:
    """Per-frame ``(height, width, k)`` concentration images, background 0."""
    out = []
    for block, table in zip(split_concentrations(result, stack), stack.blocks):
        if table.index_map.shape[0] != block.shape[0]:
            raise FormatError("index map does not match concentration block")
        out.append(refold(block, table.index_map, table.meta.width, table.meta.height))
    return out


def kinetic_profiles(result: DecompositionResult, stack: MultisetStack) -> list[KineticProfile]:
    blocks = split_concentrations(result, stack)
    # one reduction per column, so each value is exactly mean(block[:, j])
    means = np.array([[np.mean(b[:, j]) for j in range(b.shape[1])] for b in blocks])
    times = np.asarray(stack.frame_times_h, dtype=np.float64)
    return [
        KineticProfile(component_id=j, times_h=times, mean_concentration=means[:, j].copy())
        for j in range(result.n_components)
    ]


def estimate_center(mask: ForegroundMask) -> tuple[float, float]:
    """Centroid ``(cx, cy)`` of the foreground in pixel units (column, row)."""
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise ConfigError("cannot find the centre of an empty mask")
    return float(cols.mean()), float(rows.mean())


def _check_center(center: tuple[float, float], width: int, height: int) -> None:
    cx, cy = center
    if not (0.0 <= cx <= width - 1 and 0.0 <= cy <= height - 1):
        raise ConfigError(f"centre ({cx}, {cy}) lies outside the {width}x{height} image")


def _select_pixels(
    index_map: NDArray,
    center: tuple[float, float],
    distance_mm: float,
    pixel_size_mm: float,
    annulus_width_px: float,
    single_pixel: bool,
    shape: tuple[int, int],
) -> NDArray[np.int64]:
    """Row indices into the frame's pixel table that fall in the sampling region."""
    cx, cy = center
    rows, cols = index_map[:, 0], index_map[:, 1]
    if single_pixel or distance_mm == 0.0:
        # target point along +x; the nearest image pixels (ties kept, up to 4)
        tx = cx + distance_mm / pixel_size_mm
        h, w = shape
        if tx > w - 0.5:
            return np.empty(0, dtype=np.int64)
        yy, xx = np.mgrid[0:h, 0:w]
        d_img = np.hypot(xx - tx, yy - cy)
        nearest = d_img <= d_img.min() + 1e-9
        if single_pixel and distance_mm > 0.0:
            # keep one pixel: lowest raster index among ties
            first = np.flatnonzero(nearest.ravel())[0]
            nearest = np.zeros_like(nearest)
            nearest.flat[first] = True
        return np.flatnonzero(nearest[rows, cols])
    r_mm = np.hypot(cols - cx, rows - cy) * pixel_size_mm
    half = 0.5 * annulus_width_px * pixel_size_mm
    return np.flatnonzero(np.abs(r_mm - distance_mm) <= half)


def radial_series(
    result: DecompositionResult,
    stack: MultisetStack,
    center: tuple[float, float],
    distance_mm: float,
    pixel_size_mm: float,
    annulus_width_px: float = 1.0,
    *,
    single_pixel: bool = False,
) -> list[RadialSeries]:
    """Concentration at ``distance_mm`` from ``center`` over time, one series per component.

    Each frame averages the foreground pixels whose centre distance lies
    within half an annulus width of ``distance_mm``. At distance 0 the pixels
    nearest the centre are used instead (one, or up to four on a tie).
    ``single_pixel`` samples the one pixel nearest the point at
    ``distance_mm`` along the +x axis. Frames with no qualifying foreground
    pixel get NaN and a zero pixel count.
    """
    if distance_mm < 0:
        raise ConfigError("distance must be non-negative")
    if not pixel_size_mm > 0 or not annulus_width_px > 0:
        raise ConfigError("pixel size and annulus width must be positive")
    meta = stack.meta
    _check_center(center, meta.width, meta.height)
    k = result.n_components
    values = np.full((len(stack.blocks), k), np.nan)
    counts = np.zeros(len(stack.blocks), dtype=np.int64)
    for f, (block, table) in enumerate(zip(split_concentrations(result, stack), stack.blocks)):
        sel = _select_pixels(
            table.index_map, center, distance_mm, pixel_size_mm, annulus_width_px,
            single_pixel, (table.meta.height, table.meta.width),
        )
        counts[f] = sel.size
        if sel.size:
            values[f] = block[sel].mean(axis=0)
    times = np.asarray(stack.frame_times_h, dtype=np.float64)
    return [
        RadialSeries(j, float(distance_mm), times, values[:, j].copy(), counts.copy())
        for j in range(k)
    ]


def _write_pgm16(path: Path, image: NDArray) -> Path:
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        scale = (hi - lo) / PGM16_MAX
        gray = np.rint((image - lo) / scale)
    else:
        scale = 0.0
        gray = np.zeros_like(image)
    write_pgm(path, np.clip(gray, 0, PGM16_MAX).astype(np.uint16), maxval=PGM16_MAX)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"offset": lo, "scale": scale, "min": lo, "max": hi}, indent=2) + "\n"
    )
    return path


def _write_csv(path: Path, image: NDArray) -> Path:
    lines = [",".join(repr(float(v)) for v in row) for row in image]
    path.write_text("\n".join(lines) + "\n")
    return path


def export_maps(maps: ArrayLike, path: PathLike, fmt: str = "pgm16") -> list[Path]:
    """Write one map (2D) or a component stack (``(h, w, k)``) to disk.

    ``pgm16`` scales each file linearly to 16 bits; the JSON sidecar holds
    ``value = offset + scale * gray``. A constant map gets ``scale = 0``.
    ``csv`` writes the raw values. A stack produces ``<stem>_c<j><suffix>``
    files. Returns the written image paths.
    """
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ConfigError("maps must be 2D or (height, width, k)")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("maps contain non-finite values")
    if fmt not in ("pgm16", "csv"):
        raise ConfigError(f"unknown map format {fmt!r}")
    writer = _write_pgm16 if fmt == "pgm16" else _write_csv
    path = Path(path)
    if arr.ndim == 2:
        return [writer(path, arr)]
    return [
        writer(path.with_name(f"{path.stem}_c{j}{path.suffix}"), arr[:, :, j])
        for j in range(arr.shape[2])
    ]


def read_map_csv(path: PathLike) -> NDArray[np.float64]:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_map_pgm16(path: PathLike) -> NDArray[np.float64]:
    """Reconstruct map values from a 16-bit PGM and its scale sidecar."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    gray = read_pgm(path).astype(np.float64)
    return meta["offset"] + meta["scale"] * gray


def write_kinetics_csv(profiles: Sequence[KineticProfile], path: PathLike) -> None:
    lines = ["component,time_h,mean_concentration"]
    for p in profiles:
        lines += [
            f"{p.component_id},{t:.17g},{v:.17g}"
            for t, v in zip(p.times_h, p.mean_concentration)
        ]
    Path(path).write_text("\n".join(lines) + "\n")


def write_radial_csv(series: Sequence[RadialSeries], path: PathLike) -> None:
    """Empty annuli are written with ``nan`` values and ``n_pixels = 0``."""
    lines = ["component,distance_mm,time_h,value,n_pixels"]
    for s in series:
        lines += [
            f"{s.component_id},{s.distance_mm:.17g},{t:.17g},{v:.17g},{n}"
            for t, v, n in zip(s.times_h, s.values, s.pixel_counts)
        ]
    Path(path).write_text("\n".join(lines) + "\n")
