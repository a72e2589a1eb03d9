"""Run configuration and the load -> mask -> unfold -> initialise -> ALS pipeline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cubeio import (
    ForegroundMask,
    HyperCube,
    MultisetStack,
    PathLike,
    build_multiset,
    compute_mask,
    read_cube,
    read_manifest,
    unfold,
)
from .engine import AlsOptions, ConstraintSpec, DecompositionResult, als_decompose
from .errors import ConfigError, FormatError
from .ilt import IltParams
from .numkit import svd_denoise
from .simplisma import PuritySelection, simplisma_init

log = logging.getLogger(__name__)

__all__ = [
    "MaskConfig",
    "AnalysisConfig",
    "RunConfig",
    "load_series",
    "build_stack",
    "load_stack",
    "initial_spectra",
    "run_decomposition",
]

DEFAULT_DISTANCES_MM = (0.0, 1.72, 2.31, 3.15)


@dataclass(frozen=True)
class MaskConfig:
    method: str = "fixed_fraction"
    fraction: float | None = 0.1
    path: str | None = None

    def __post_init__(self) -> None:
        if self.method not in ("otsu", "fixed_fraction", "external"):
            raise ConfigError(f"unknown mask method {self.method!r}")
        if self.method == "fixed_fraction" and not (
            self.fraction is not None and 0.0 < self.fraction < 1.0
        ):
            raise ConfigError("fixed_fraction mask needs 0 < fraction < 1")
        if self.method == "external" and not self.path:
            raise ConfigError("external mask needs a path")


@dataclass(frozen=True)
class AnalysisConfig:
    distances_mm: tuple[float, ...] = DEFAULT_DISTANCES_MM
    center: tuple[float, float] | None = None  # (cx, cy) pixels; default: first-frame centroid
    annulus_width_px: float = 1.0
    single_pixel: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "distances_mm", tuple(float(d) for d in self.distances_mm))
        if any(d < 0 for d in self.distances_mm):
            raise ConfigError("radial distances must be non-negative")
        if self.center is not None:
            if len(self.center) != 2:
                raise ConfigError("center must be [cx, cy]")
            object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not self.annulus_width_px > 0:
            raise ConfigError("annulus_width_px must be positive")


def _sub(cls: type, value: Any) -> Any:
    if value is None or isinstance(value, cls):
        return value if value is not None else cls()
    if not isinstance(value, dict):
        raise ConfigError(f"{cls.__name__} section must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None = None
    n_components: int = 3
    mask: MaskConfig = field(default_factory=MaskConfig)
    simplisma_offset: float = 0.05
    simplisma_denoise: bool = True
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    als: AlsOptions = field(default_factory=AlsOptions)
    ilt: IltParams = field(default_factory=IltParams)
    out_dir: str | None = None
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    non_process: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.n_components, int) or self.n_components < 1:
            raise ConfigError(f"n_components must be an integer >= 1, got {self.n_components!r}")
        if not self.simplisma_offset > 0:
            raise ConfigError("simplisma_offset must be positive")
        object.__setattr__(self, "non_process", tuple(int(j) for j in self.non_process))
        bad = [j for j in self.non_process if not 0 <= j < self.n_components]
        if bad:
            raise ConfigError(f"non_process indices {bad} outside 0..{self.n_components - 1}")
        self.constraints.flags_for(self.n_components)

    def validate_inputs(self) -> None:
        """Check referenced files exist."""
        if self.manifest is None:
            raise ConfigError("no manifest given")
        if not Path(self.manifest).is_file():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.mask.method == "external" and not Path(str(self.mask.path)).is_file():
            raise ConfigError(f"mask file not found: {self.mask.path}")

    def to_dict(self) -> dict:
        a = self.analysis
        return {
            "manifest": self.manifest,
            "n_components": self.n_components,
            "mask": {"method": self.mask.method, "fraction": self.mask.fraction, "path": self.mask.path},
            "simplisma_offset": self.simplisma_offset,
            "simplisma_denoise": self.simplisma_denoise,
            "constraints": self.constraints.to_dict(),
            "als": self.als.to_dict(),
            "ilt": self.ilt.to_dict(),
            "out_dir": self.out_dir,
            "analysis": {
                "distances_mm": list(a.distances_mm),
                "center": list(a.center) if a.center else None,
                "annulus_width_px": a.annulus_width_px,
                "single_pixel": a.single_pixel,
            },
            "non_process": list(self.non_process),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        kw["mask"] = _sub(MaskConfig, kw.get("mask"))
        kw["als"] = _sub(AlsOptions, kw.get("als"))
        analysis = kw.get("analysis")
        if isinstance(analysis, dict) and "distances_mm" in analysis:
            analysis = {**analysis, "distances_mm": tuple(analysis["distances_mm"])}
        kw["analysis"] = _sub(AnalysisConfig, analysis)
        try:
            kw["constraints"] = ConstraintSpec.from_dict(kw.get("constraints") or {})
            kw["ilt"] = IltParams.from_dict(kw.get("ilt"))
        except TypeError as exc:
            raise ConfigError(f"invalid config section: {exc}") from None
        kw["non_process"] = tuple(kw.get("non_process") or ())
        return cls(**kw)

    @classmethod
    def load(cls, path: PathLike) -> "RunConfig":
        """Read a JSON config; a relative manifest path resolves against the config's directory."""
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
        cfg = cls.from_dict(doc)
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg = cls.from_dict({**doc, "manifest": str(path.parent / cfg.manifest)})
        return cfg


def load_series(manifest: PathLike) -> list[HyperCube]:
    frames = []
    for path, t in read_manifest(manifest):
        if not path.is_file():
            raise FormatError(f"cube file not found: {path}")
        cube = read_cube(path)
        if cube.meta.frame_time_h != t:
            log.debug("%s: manifest time %g h overrides header %g h", path, t, cube.meta.frame_time_h)
        frames.append(cube)
    return frames


def build_stack(
    frames: Sequence[HyperCube], times_h: Sequence[float], mask: MaskConfig
) -> tuple[MultisetStack, list[ForegroundMask]]:
    """Per-frame masks, unfolded tables and the multiset."""
    masks = [
        compute_mask(f, mask.method, fraction=mask.fraction, path=mask.path) for f in frames
    ]
    tables = [unfold(f, m) for f, m in zip(frames, masks)]
    return build_multiset(tables, times_h), masks


def load_stack(cfg: RunConfig) -> tuple[MultisetStack, list[ForegroundMask]]:
    """Masked multiset for the configured manifest; frame times come from the manifest."""
    cfg.validate_inputs()
    times = [t for _, t in read_manifest(cfg.manifest)]
    return build_stack(load_series(cfg.manifest), times, cfg.mask)


def initial_spectra(
    D: np.ndarray, k: int, offset_fraction: float, denoise: bool = True
) -> tuple[np.ndarray, PuritySelection]:
    """Pure-pixel initial spectra.

    With ``denoise`` the pixel purities are evaluated on the rank-``k``
    reconstruction of ``D``; otherwise single noisy pixels dominate the
    determinant weights and the picks drift to low-signal edge pixels.
    """
    source = svd_denoise(D, k) if denoise else D
    return simplisma_init(source, k, offset_fraction)


def run_decomposition(
    cfg: RunConfig, frames: Sequence[HyperCube] | None = None
) -> tuple[DecompositionResult, MultisetStack, list[ForegroundMask], PuritySelection]:
    if frames is None:
        stack, masks = load_stack(cfg)
    else:
        stack, masks = build_stack(frames, [f.meta.frame_time_h for f in frames], cfg.mask)
    D = stack.augmented()
    if cfg.n_components > min(D.shape):
        raise ConfigError(f"{cfg.n_components} components exceed the data dimensions {D.shape}")
    S0, selection = initial_spectra(D, cfg.n_components, cfg.simplisma_offset, cfg.simplisma_denoise)
    for row, purity in zip(selection.selected_rows, selection.purity_values):
        f = int(np.searchsorted(stack.row_offsets, row, side="right") - 1)
        r, c = stack.blocks[f].index_map[row - stack.row_offsets[f]]
        log.info("pure pixel: row %d -> frame %d (row %d, col %d), purity %.4g", row, f, r, c, purity)
    result = als_decompose(stack, S0, cfg.constraints, cfg.als)
    return result, stack, masks, selection
