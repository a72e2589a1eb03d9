"""Result directory layout for a decomposition run.

::

    spectra.csv          echo_time_ms, c0 .. c{k-1}
    concentrations/      frame_000.cube ... ("kind": "concentration", n_echoes = k)
    masks/               frame_000.pgm ...
    frames.json          frame times, file names, geometry
    diagnostics.json     fit diagnostics, status, iteration counts
    options.json         constraint spec, ALS options, non-process components
    lof_trace.csv        iteration, lack_of_fit_pct
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .cubeio import (
    AcquisitionMeta,
    ForegroundMask,
    MultisetStack,
    PathLike,
    PixelTable,
    read_raster,
    write_raster,
)
from .engine import AlsOptions, ConstraintSpec, DecompositionResult, split_concentrations
from .errors import FormatError
from .numkit import FitDiagnostics

__all__ = ["LoadedResult", "save_result", "load_result", "read_spectra_csv"]


@dataclass(frozen=True, eq=False)
class LoadedResult:
    """A result read back from disk.

    ``stack`` carries the pixel index maps and frame times but no signal
    values (its tables hold read-only zero views).
    """

    result: DecompositionResult
    stack: MultisetStack
    masks: tuple[ForegroundMask, ...]
    echo_times_ms: NDArray[np.float64]
    non_process: tuple[int, ...]
    options: dict


def _spectra_csv(echo_times: NDArray, S: NDArray) -> str:
    k = S.shape[1]
    lines = ["echo_time_ms," + ",".join(f"c{j}" for j in range(k))]
    lines += [
        f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) for t, row in zip(echo_times, S)
    ]
    return "\n".join(lines) + "\n"


def read_spectra_csv(path: PathLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return ``(echo_times_ms, S)`` from a spectra CSV."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 0].copy(), arr[:, 1:].copy()


def save_result(
    out_dir: PathLike,
    result: DecompositionResult,
    stack: MultisetStack,
    masks: Sequence[ForegroundMask],
    *,
    non_process: Sequence[int] = (),
    als_options: AlsOptions | None = None,
) -> Path:
    out = Path(out_dir)
    (out / "concentrations").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    if len(masks) != len(stack.blocks):
        raise FormatError(f"{len(masks)} masks for {len(stack.blocks)} frames")

    (out / "spectra.csv").write_text(_spectra_csv(stack.echo_times_ms, result.S))
    frames = []
    blocks = split_concentrations(result, stack)
    for i, (block, table, mask) in enumerate(zip(blocks, stack.blocks, masks)):
        meta = table.meta
        raster = np.zeros((meta.height, meta.width, result.n_components))
        raster[table.index_map[:, 0], table.index_map[:, 1]] = block
        header = {**meta.to_header(), "kind": "concentration"}
        write_raster(out / "concentrations" / f"frame_{i:03d}.cube", raster, header)
        mask.save(out / "masks" / f"frame_{i:03d}.pgm")
        frames.append(
            {
                "frame_time_h": stack.frame_times_h[i],
                "concentration": f"concentrations/frame_{i:03d}.cube",
                "mask": f"masks/frame_{i:03d}.pgm",
                "n_pixels": table.n_pixels,
            }
        )
    meta = stack.meta
    (out / "frames.json").write_text(
        json.dumps({"acquisition": meta.to_header(), "frames": frames}, indent=2) + "\n"
    )
    diag = {
        **result.diagnostics.to_dict(),
        "status": result.status,
        "n_iterations": result.n_iterations,
        "best_iteration": result.best_iteration,
        "n_components": result.n_components,
    }
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2) + "\n")
    options = {
        "constraints": result.constraints.to_dict(),
        "als": (als_options or AlsOptions()).to_dict(),
        "non_process": sorted(int(j) for j in non_process),
    }
    (out / "options.json").write_text(json.dumps(options, indent=2) + "\n")
    trace = ["iteration,lack_of_fit_pct"]
    trace += [f"{i + 1},{v:.17g}" for i, v in enumerate(result.lof_trace)]
    (out / "lof_trace.csv").write_text("\n".join(trace) + "\n")
    return out


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"result directory is missing {path.name}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from None


def load_result(result_dir: PathLike) -> LoadedResult:
    """Rebuild a :class:`DecompositionResult` and its pixel geometry from disk.

    Concentrations come back at float32 precision.
    """
    root = Path(result_dir)
    if not root.is_dir():
        raise FormatError(f"{root}: result directory not found")
    frames_doc = _read_json(root / "frames.json")
    diag = _read_json(root / "diagnostics.json")
    options = _read_json(root / "options.json")
    spectra = root / "spectra.csv"
    if not spectra.exists():
        raise FormatError(f"result directory is missing {spectra.name}")
    echo_times, S = read_spectra_csv(spectra)
    k = S.shape[1]

    base_meta = AcquisitionMeta.from_header(frames_doc["acquisition"])
    tables, masks, blocks, times = [], [], [], []
    for entry in frames_doc["frames"]:
        header, raster = read_raster(root / entry["concentration"])
        if header.get("kind") != "concentration" or header["n_echoes"] != k:
            raise FormatError(f"{entry['concentration']}: not a {k}-component concentration raster")
        mask = ForegroundMask.load(root / entry["mask"])
        rows, cols = np.nonzero(mask.bits)
        index_map = np.stack([rows, cols], axis=1).astype(np.int64)
        meta = AcquisitionMeta(
            te1_ms=base_meta.te1_ms,
            delta_te_ms=base_meta.delta_te_ms,
            n_echoes=base_meta.n_echoes,
            matrix_size=base_meta.matrix_size,
            tr_s=base_meta.tr_s,
            fov_mm=base_meta.fov_mm,
            slice_thickness_um=base_meta.slice_thickness_um,
            frame_time_h=float(entry["frame_time_h"]),
        )
        values = np.broadcast_to(np.zeros(1), (rows.size, meta.n_echoes))
        tables.append(PixelTable(values=values, index_map=index_map, meta=meta))
        masks.append(mask)
        blocks.append(raster[rows, cols].astype(np.float64))
        times.append(float(entry["frame_time_h"]))
    stack = MultisetStack(blocks=tuple(tables), frame_times_h=tuple(times))
    result = DecompositionResult(
        C_aug=np.vstack(blocks),
        S=S,
        diagnostics=FitDiagnostics(
            explained_variance_pct=diag["explained_variance_pct"],
            lack_of_fit_pct=diag["lack_of_fit_pct"],
            sum_sq_data=diag["sum_sq_data"],
            sum_sq_residual=diag["sum_sq_residual"],
        ),
        lof_trace=tuple(
            float(line.split(",")[1])
            for line in (root / "lof_trace.csv").read_text().splitlines()[1:]
            if line
        ),
        status=diag["status"],
        constraints=ConstraintSpec.from_dict(options["constraints"]),
        block_offsets=stack.row_offsets,
        best_iteration=int(diag["best_iteration"]),
    )
    return LoadedResult(
        result=result,
        stack=stack,
        masks=tuple(masks),
        echo_times_ms=echo_times,
        non_process=tuple(options.get("non_process", ())),
        options=options,
    )
