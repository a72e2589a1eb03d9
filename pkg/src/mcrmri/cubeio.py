"""Multi-echo image cubes: file format, masking, unfolding and multiset assembly.

Cube file layout::

    b"MRC1" | UTF-8 JSON header | b"\\0" | float32 little-endian payload

The payload is ``height * width * n_echoes`` values in (row, col, echo)
order. Concentration rasters reuse the layout with ``"kind": "concentration"``
and ``n_echoes`` holding the component count.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigError, FormatError

MAGIC = b"MRC1"
PathLike = Union[str, os.PathLike]

__all__ = [
    "AcquisitionMeta",
    "HyperCube",
    "ForegroundMask",
    "PixelTable",
    "MultisetStack",
    "read_cube",
    "write_cube",
    "read_raster",
    "write_raster",
    "read_pgm",
    "write_pgm",
    "compute_mask",
    "otsu_threshold",
    "unfold",
    "refold",
    "build_multiset",
    "read_manifest",
    "write_manifest",
]


@dataclass(frozen=True)
class AcquisitionMeta:
    te1_ms: float
    delta_te_ms: float
    n_echoes: int
    matrix_size: tuple[int, int]  # (width, height)
    tr_s: float = 1.5
    fov_mm: tuple[float, float] = (10.0, 10.0)
    slice_thickness_um: float = 500.0
    frame_time_h: float = 0.0

    def __post_init__(self) -> None:
        if not (self.te1_ms > 0 and self.delta_te_ms > 0):
            raise ConfigError("te1_ms and delta_te_ms must be positive")
        if self.n_echoes < 2:
            raise ConfigError("n_echoes must be >= 2")
        w, h = self.matrix_size
        if w < 1 or h < 1:
            raise ConfigError("matrix_size must be positive")

    @property
    def width(self) -> int:
        return self.matrix_size[0]

    @property
    def height(self) -> int:
        return self.matrix_size[1]

    @property
    def echo_times_ms(self) -> NDArray[np.float64]:
        return self.te1_ms + self.delta_te_ms * np.arange(self.n_echoes)

    @property
    def pixel_size_mm(self) -> tuple[float, float]:
        return (self.fov_mm[0] / self.width, self.fov_mm[1] / self.height)

    def same_echo_axis(self, other: "AcquisitionMeta") -> bool:
        return (
            self.n_echoes == other.n_echoes
            and self.te1_ms == other.te1_ms
            and self.delta_te_ms == other.delta_te_ms
        )

    def to_header(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_echoes": self.n_echoes,
            "te1_ms": self.te1_ms,
            "delta_te_ms": self.delta_te_ms,
            "tr_s": self.tr_s,
            "fov_mm": list(self.fov_mm),
            "slice_thickness_um": self.slice_thickness_um,
            "frame_time_h": self.frame_time_h,
        }

    @classmethod
    def from_header(cls, header: dict) -> "AcquisitionMeta":
        try:
            fov = header["fov_mm"]
            return cls(
                te1_ms=float(header["te1_ms"]),
                delta_te_ms=float(header["delta_te_ms"]),
                n_echoes=int(header["n_echoes"]),
                matrix_size=(int(header["width"]), int(header["height"])),
                tr_s=float(header["tr_s"]),
                fov_mm=(float(fov[0]), float(fov[1])),
                slice_thickness_um=float(header["slice_thickness_um"]),
                frame_time_h=float(header["frame_time_h"]),
            )
        except KeyError as exc:
            raise FormatError(f"cube header missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError, IndexError, ConfigError) as exc:
            raise FormatError(f"cube header has invalid field values: {exc}") from None


@dataclass(frozen=True, eq=False)
class HyperCube:
    """One image frame: ``data`` has shape (height, width, n_echoes).

    Gaussian-noise phantoms produce small negative intensities, so only
    finiteness is enforced here.
    """

    meta: AcquisitionMeta
    data: NDArray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        expected = (self.meta.height, self.meta.width, self.meta.n_echoes)
        if data.shape != expected:
            raise FormatError(f"cube data shape {data.shape} does not match header {expected}")
        if not np.all(np.isfinite(data)):
            raise FormatError("cube data contains non-finite values")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HyperCube):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.data, other.data)

    def mean_image(self) -> NDArray[np.float64]:
        return self.data.astype(np.float64).mean(axis=2)


def _write_payload(path: PathLike, header: dict, data: NDArray) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(blob)
        fh.write(b"\0")
        fh.write(payload.tobytes(order="C"))


def _read_payload(path: PathLike) -> tuple[dict, NDArray[np.float32]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic bytes, expected {MAGIC!r}")
    end = raw.find(b"\0", len(MAGIC))
    if end < 0:
        raise FormatError(f"{path}: header not terminated by NUL")
    try:
        header = json.loads(raw[len(MAGIC) : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    for key in ("width", "height", "n_echoes"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise FormatError(f"{path}: header field {key!r} missing or not a positive integer")
    shape = (header["height"], header["width"], header["n_echoes"])
    body = raw[end + 1 :]
    expected = 4 * math.prod(shape)
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload has {len(body)} bytes but header n_echoes/width/height "
            f"require {expected}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return header, data


def read_cube(path: PathLike) -> HyperCube:
    """Load a cube file; raises :class:`FormatError` naming the bad field."""
    header, data = _read_payload(path)
    kind = header.get("kind", "cube")
    if kind != "cube":
        raise FormatError(f"{path}: field 'kind' is {kind!r}, expected 'cube'")
    return HyperCube(AcquisitionMeta.from_header(header), data)


def write_cube(cube: HyperCube, path: PathLike) -> None:
    if not np.all(np.isfinite(cube.data)):
        raise FormatError("refusing to write non-finite cube data")
    _write_payload(path, cube.meta.to_header(), cube.data)


def write_raster(path: PathLike, data: ArrayLike, header: dict) -> None:
    """Write an arbitrary (height, width, depth) float raster with extra header keys."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to write non-finite raster")
    h, w, d = arr.shape
    full = dict(header)
    full.update(width=w, height=h, n_echoes=d)
    _write_payload(path, full, arr)


def read_raster(path: PathLike) -> tuple[dict, NDArray[np.float32]]:
    return _read_payload(path)


def write_pgm(path: PathLike, image: ArrayLike, maxval: int = 255) -> None:
    """Binary PGM (P5); 8-bit when ``maxval < 256``, otherwise 16-bit big-endian."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2D")
    h, w = img.shape
    dtype = ">u1" if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def read_pgm(path: PathLike) -> NDArray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    pos += 1  # single whitespace after maxval
    dtype = ">u1" if maxval < 256 else ">u2"
    body = raw[pos:]
    need = w * h * np.dtype(dtype).itemsize
    if len(body) < need:
        raise FormatError(f"{path}: PGM payload too short")
    return np.frombuffer(body[:need], dtype=dtype).reshape(h, w)


@dataclass(frozen=True, eq=False)
class ForegroundMask:
    bits: NDArray[np.bool_]

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise FormatError("mask must be 2D")
        if not bits.any():
            raise ConfigError("mask has no foreground pixels")
        bits = bits.copy()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ForegroundMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def save(self, path: PathLike) -> None:
        write_pgm(path, self.bits.astype(np.uint8) * 255)

    @classmethod
    def load(cls, path: PathLike) -> "ForegroundMask":
        return cls(read_pgm(path) != 0)


def otsu_threshold(values: ArrayLike, nbins: int = 256) -> float:
    """Otsu's threshold over ``nbins`` equal bins spanning ``[min, max]``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ConfigError("degenerate histogram: all pixels have the same intensity")
    counts, edges = np.histogram(v, bins=nbins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = counts / counts.sum()
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu[-1] * w0 - mu) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def compute_mask(
    cube: HyperCube,
    method: str = "otsu",
    *,
    fraction: float | None = None,
    path: PathLike | None = None,
) -> ForegroundMask:
    """Foreground mask from the echo-mean image.

    ``method`` is ``"otsu"``, ``"fixed_fraction"`` (needs ``fraction``) or
    ``"external"`` (needs ``path`` to a P5 PGM, nonzero = foreground).
    """
    mean = cube.mean_image()
    if method == "otsu":
        thr = otsu_threshold(mean)
        bits = mean > thr
    elif method == "fixed_fraction":
        if fraction is None or not 0.0 < fraction < 1.0:
            raise ConfigError("fixed_fraction requires 0 < fraction < 1")
        bits = mean > fraction * mean.max()
    elif method == "external":
        if path is None:
            raise ConfigError("external mask requires a path")
        bits = read_pgm(path) != 0
        if bits.shape != mean.shape:
            raise FormatError(
                f"external mask is {bits.shape[1]}x{bits.shape[0]}, "
                f"cube is {cube.meta.width}x{cube.meta.height}"
            )
    else:
        raise ConfigError(f"unknown mask method {method!r}")
    if not bits.any():
        raise ConfigError("mask has no foreground pixels")
    return ForegroundMask(bits)


@dataclass(frozen=True, eq=False)
class PixelTable:
    """Foreground pixels x echoes, rows in raster order."""

    values: NDArray[np.float64]
    index_map: NDArray[np.int64]  # (n, 2) of (row, col)
    meta: AcquisitionMeta

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.index_map.shape != (self.values.shape[0], 2):
            raise FormatError("index_map must have one (row, col) entry per table row")

    @property
    def n_pixels(self) -> int:
        return self.values.shape[0]


def unfold(cube: HyperCube, mask: ForegroundMask) -> PixelTable:
    if mask.bits.shape != (cube.meta.height, cube.meta.width):
        raise FormatError(
            f"mask {mask.width}x{mask.height} does not match cube "
            f"{cube.meta.width}x{cube.meta.height}"
        )
    rows, cols = np.nonzero(mask.bits)  # row-major scan order
    values = cube.data[rows, cols, :].astype(np.float64)
    index_map = np.stack([rows, cols], axis=1).astype(np.int64)
    values.flags.writeable = False
    index_map.flags.writeable = False
    return PixelTable(values=values, index_map=index_map, meta=cube.meta)


def refold(
    values: ArrayLike,
    index_map: ArrayLike,
    width: int,
    height: int,
    fill: float = 0.0,
) -> NDArray[np.float64]:
    """Place a per-pixel vector (or ``(n, k)`` matrix) back onto the image grid."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.asarray(index_map, dtype=np.int64)
    if v.shape[0] != idx.shape[0]:
        raise FormatError(f"{v.shape[0]} values for {idx.shape[0]} mapped pixels")
    out = np.full((height, width) + v.shape[1:], fill, dtype=np.float64)
    out[idx[:, 0], idx[:, 1]] = v
    return out


@dataclass(frozen=True, eq=False)
class MultisetStack:
    blocks: tuple[PixelTable, ...]
    frame_times_h: tuple[float, ...]
    row_offsets: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        offsets = np.concatenate([[0], np.cumsum([b.n_pixels for b in self.blocks])[:-1]])
        object.__setattr__(self, "row_offsets", tuple(int(o) for o in offsets))

    @property
    def n_rows(self) -> int:
        return sum(b.n_pixels for b in self.blocks)

    @property
    def meta(self) -> AcquisitionMeta:
        return self.blocks[0].meta

    @property
    def echo_times_ms(self) -> NDArray[np.float64]:
        return self.meta.echo_times_ms

    def augmented(self) -> NDArray[np.float64]:
        return np.vstack([b.values for b in self.blocks])

    def block_slices(self) -> list[slice]:
        return [slice(o, o + b.n_pixels) for o, b in zip(self.row_offsets, self.blocks)]


def build_multiset(tables: Sequence[PixelTable], times_h: Sequence[float]) -> MultisetStack:
    """Stack per-frame tables row-wise under one shared echo axis."""
    if len(tables) < 1:
        raise ConfigError("multiset needs at least one table")
    if len(tables) != len(times_h):
        raise ConfigError(f"{len(tables)} tables but {len(times_h)} frame times")
    ref = tables[0].meta
    for t in tables[1:]:
        if not ref.same_echo_axis(t.meta):
            raise FormatError("images not co-registered on echo dimension")
    times = [float(t) for t in times_h]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("frame times must be strictly increasing")
    return MultisetStack(blocks=tuple(tables), frame_times_h=tuple(times))


def read_manifest(path: PathLike) -> list[tuple[Path, float]]:
    """Parse a series manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from None
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{path}: manifest must be a non-empty JSON list")
    out = []
    for i, entry in enumerate(entries):
        try:
            p = Path(entry["path"])
            t = float(entry["frame_time_h"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: entry {i} needs 'path' and 'frame_time_h'") from None
        out.append((p if p.is_absolute() else path.parent / p, t))
    return out


def write_manifest(path: PathLike, entries: Sequence[tuple[str, float]]) -> None:
    Path(path).write_text(
        json.dumps([{"path": str(p), "frame_time_h": t} for p, t in entries], indent=2) + "\n"
    )
