"""Swelling-cylinder phantom with two inward waterfronts and an external bath.

Component order in the ground truth is (slow-front water, fast-front water,
bath), i.e. ascending T2 with the defaults 7, 17 and 33 ms. An optional
fourth, non-decaying baseline component stands in for a non-process
contribution.

Geometry, with ``r`` the distance from the image centre and ``R0`` the
initial radius:

* sample edge ``R(t) = R0 (1 + swell (1 - exp(-t / tau)))``
* fast front ``r_f(t) = R0 - v_fast t``; fast water fills ``r_f < r < R0``
* slow front ``r_s(t) = R0 - v_slow t``; slow water fills ``r_s < r < R(t)``
* bath fills ``r > R(t)`` (up to ``bath_radius_mm`` when set)

Every boundary is a linear ramp ``ramp_px`` pixels wide. Front radii keep
decreasing past zero, so a front has fully covered the centre once it is
half a ramp beyond it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .cubeio import AcquisitionMeta, ForegroundMask, HyperCube, write_cube, write_manifest, write_raster
from .errors import ConfigError

DEFAULT_PIXEL_MM = 0.07812


def _default_times() -> tuple[float, ...]:
    return tuple(float(t) for t in np.geomspace(0.3, 21.3, 12))


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 64
    height: int = 64
    pixel_size_mm: float = DEFAULT_PIXEL_MM
    te1_ms: float = 5.0
    delta_te_ms: float = 5.0
    n_echoes: int = 32
    tr_s: float = 1.5
    slice_thickness_um: float = 500.0
    times_h: tuple[float, ...] = field(default_factory=_default_times)
    initial_radius_mm: float = 2.34
    swelling_fraction: float = 0.257
    swelling_time_constant_h: float = 4.0
    fast_front_speed: float = 2.34 / 6.0
    slow_front_speed: float = 2.34 / 13.0
    t2_ms: tuple[float, float, float] = (7.0, 17.0, 33.0)
    amplitudes: tuple[float, float, float] = (1.0, 0.6, 1.0)
    ramp_px: float = 2.0
    bath_radius_mm: float | None = None
    include_baseline: bool = False
    baseline_amplitude: float = 0.1
    snr: float = 50.0
    noise_model: str = "gaussian"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "times_h", tuple(float(t) for t in self.times_h))
        object.__setattr__(self, "t2_ms", tuple(float(t) for t in self.t2_ms))
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if self.width < 1 or self.height < 1 or self.pixel_size_mm <= 0:
            raise ConfigError("image size and pixel size must be positive")
        if len(self.times_h) < 1:
            raise ConfigError("phantom needs at least one frame")
        if any(b <= a for a, b in zip(self.times_h, self.times_h[1:])) or self.times_h[0] < 0:
            raise ConfigError("frame times must be non-negative and strictly increasing")
        if len(self.t2_ms) != 3 or len(self.amplitudes) != 3:
            raise ConfigError("t2_ms and amplitudes need three entries (slow, fast, bath)")
        positive = (
            self.initial_radius_mm,
            self.swelling_time_constant_h,
            self.fast_front_speed,
            self.slow_front_speed,
            self.ramp_px,
            self.snr,
            *self.t2_ms,
        )
        if any(not v > 0 for v in positive):
            raise ConfigError("radii, speeds, T2 values, ramp width and snr must be positive")
        if self.swelling_fraction < 0 or any(a < 0 for a in self.amplitudes):
            raise ConfigError("swelling fraction and amplitudes must be non-negative")
        half_extent = 0.5 * min(self.width, self.height) * self.pixel_size_mm
        if self.initial_radius_mm > half_extent:
            raise ConfigError(
                f"initial radius {self.initial_radius_mm} mm exceeds the image half-extent "
                f"{half_extent:.3f} mm"
            )
        if self.slow_front_speed > self.fast_front_speed:
            raise ConfigError("slow front would overtake the fast front")
        if self.noise_model not in ("gaussian", "rician"):
            raise ConfigError(f"unknown noise model {self.noise_model!r}")

    @property
    def n_components(self) -> int:
        return 4 if self.include_baseline else 3

    @property
    def echo_times_ms(self) -> NDArray[np.float64]:
        return self.te1_ms + self.delta_te_ms * np.arange(self.n_echoes)

    def meta(self, frame_time_h: float) -> AcquisitionMeta:
        return AcquisitionMeta(
            te1_ms=self.te1_ms,
            delta_te_ms=self.delta_te_ms,
            n_echoes=self.n_echoes,
            matrix_size=(self.width, self.height),
            tr_s=self.tr_s,
            fov_mm=(self.width * self.pixel_size_mm, self.height * self.pixel_size_mm),
            slice_thickness_um=self.slice_thickness_um,
            frame_time_h=frame_time_h,
        )

    def radius_at(self, t_h: float) -> float:
        growth = 1.0 - math.exp(-t_h / self.swelling_time_constant_h)
        return self.initial_radius_mm * (1.0 + self.swelling_fraction * growth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["times_h"] = list(self.times_h)
        d["t2_ms"] = list(self.t2_ms)
        d["amplitudes"] = list(self.amplitudes)
        if math.isinf(self.snr):
            d["snr"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("times_h", "t2_ms", "amplitudes"):
            if key in d:
                d[key] = tuple(d[key])
        if "snr" in d:
            d["snr"] = float(d["snr"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid phantom spec: {exc}") from None


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    C_maps: tuple[NDArray[np.float64], ...]  # per frame, (height, width, k)
    S_true: NDArray[np.float64]  # (n_echoes, k), unit-norm columns
    masks: tuple[ForegroundMask | None, ...]  # signal support per frame
    spec: PhantomSpec


def _ramp(x: NDArray, width: float) -> NDArray:
    return np.clip(0.5 + x / width, 0.0, 1.0)


def _amplitude_maps(spec: PhantomSpec, t_h: float, r: NDArray) -> NDArray[np.float64]:
    """Zero-echo-time signal amplitude of each component, shape (h, w, k)."""
    w = spec.ramp_px * spec.pixel_size_mm
    R0 = spec.initial_radius_mm
    edge = spec.radius_at(t_h)
    inside = _ramp(edge - r, w)
    r_fast = R0 - spec.fast_front_speed * t_h
    r_slow = R0 - spec.slow_front_speed * t_h
    a_slow, a_fast, a_bath = spec.amplitudes
    slow = a_slow * _ramp(r - r_slow, w) * inside
    fast = a_fast * _ramp(r - r_fast, w) * _ramp(R0 - r, w)
    bath = a_bath * (1.0 - inside)
    if spec.bath_radius_mm is not None:
        bath = bath * _ramp(spec.bath_radius_mm - r, w)
    maps = [slow, fast, bath]
    if spec.include_baseline:
        maps.append(spec.baseline_amplitude * inside)
    return np.stack(maps, axis=-1)


def _decays(spec: PhantomSpec) -> NDArray[np.float64]:
    t = spec.echo_times_ms
    cols = [np.exp(-t / T2) for T2 in spec.t2_ms]
    if spec.include_baseline:
        cols.append(np.ones_like(t))
    return np.stack(cols, axis=1)


def generate(spec: PhantomSpec | None = None) -> tuple[list[HyperCube], PhantomTruth]:
    """Render the frame series and its exact factorization ``D = C S^T (+ noise)``."""
    spec = spec or PhantomSpec()
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    cy, cx = (spec.height - 1) / 2.0, (spec.width - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx) * spec.pixel_size_mm

    decays = _decays(spec)
    norms = np.linalg.norm(decays, axis=0)
    S_true = decays / norms

    c_maps, clean = [], []
    for t_h in spec.times_h:
        C = _amplitude_maps(spec, t_h, r) * norms
        c_maps.append(C)
        clean.append(C @ S_true.T)

    sigma = 0.0 if math.isinf(spec.snr) else max(float(np.max(f)) for f in clean) / spec.snr
    frames, masks = [], []
    for i, (t_h, signal) in enumerate(zip(spec.times_h, clean)):
        if sigma > 0:
            rng = np.random.default_rng([spec.seed, i])
            n1 = rng.normal(0.0, sigma, signal.shape)
            if spec.noise_model == "gaussian":
                signal = signal + n1
            else:
                n2 = rng.normal(0.0, sigma, signal.shape)
                signal = np.hypot(signal + n1, n2)
        frames.append(HyperCube(spec.meta(t_h), signal))
        support = c_maps[i].sum(axis=-1) > 0
        masks.append(ForegroundMask(support) if support.any() else None)
    truth = PhantomTruth(tuple(c_maps), S_true, tuple(masks), spec)
    return frames, truth


def write_series(
    frames: list[HyperCube], truth: PhantomTruth, out_dir: str | Path
) -> Path:
    """Write cubes, a manifest and a ``truth/`` directory; returns the manifest path."""
    out = Path(out_dir)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cube in enumerate(frames):
        name = f"frame_{i:03d}.cube"
        write_cube(cube, out / name)
        entries.append((name, cube.meta.frame_time_h))
        write_raster(
            out / "truth" / f"C_true_{i:03d}.cube",
            truth.C_maps[i],
            {**cube.meta.to_header(), "kind": "concentration"},
        )
    manifest = out / "manifest.json"
    write_manifest(manifest, entries)
    t = truth.spec.echo_times_ms
    k = truth.S_true.shape[1]
    lines = ["echo_time_ms," + ",".join(f"c{j}" for j in range(k))]
    lines += [f"{t[m]:.17g}," + ",".join(f"{v:.17g}" for v in truth.S_true[m]) for m in range(len(t))]
    (out / "truth" / "S_true.csv").write_text("\n".join(lines) + "\n")
    (out / "truth" / "spec.json").write_text(json.dumps(truth.spec.to_dict(), indent=2) + "\n")
    return manifest
