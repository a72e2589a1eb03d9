"""Multiset MCR-ALS for multi-echo MRI time series, with T2 inversion and kinetics."""

from .analysis import (
    KineticProfile,
    RadialSeries,
    distribution_maps,
    estimate_center,
    export_maps,
    kinetic_profiles,
    radial_series,
)
from .cubeio import (
    AcquisitionMeta,
    ForegroundMask,
    HyperCube,
    MultisetStack,
    PixelTable,
    build_multiset,
    compute_mask,
    read_cube,
    refold,
    unfold,
    write_cube,
)
from .engine import (
    AlsOptions,
    ConstraintSpec,
    DecompositionResult,
    als_decompose,
    als_fit,
    match_components,
    split_concentrations,
)
from .errors import ConfigError, ConvergenceError, FormatError, McrError, NumericError
from .ilt import FixedLambda, IltParams, LCurve, RelaxationSpectrum, T2Grid, ilt_solve, peaks
from .numkit import FitDiagnostics, RankScan, fit_diagnostics, nnls, svd_scan
from .phantom import PhantomSpec, PhantomTruth, generate
from .simplisma import PuritySelection, simplisma_init

__all__ = [
    "KineticProfile",
    "RadialSeries",
    "distribution_maps",
    "estimate_center",
    "export_maps",
    "kinetic_profiles",
    "radial_series",
    "AcquisitionMeta",
    "ForegroundMask",
    "HyperCube",
    "MultisetStack",
    "PixelTable",
    "build_multiset",
    "compute_mask",
    "read_cube",
    "refold",
    "unfold",
    "write_cube",
    "AlsOptions",
    "ConstraintSpec",
    "DecompositionResult",
    "als_decompose",
    "als_fit",
    "match_components",
    "split_concentrations",
    "ConfigError",
    "ConvergenceError",
    "FormatError",
    "McrError",
    "NumericError",
    "FixedLambda",
    "IltParams",
    "LCurve",
    "RelaxationSpectrum",
    "T2Grid",
    "ilt_solve",
    "peaks",
    "FitDiagnostics",
    "RankScan",
    "fit_diagnostics",
    "nnls",
    "svd_scan",
    "PhantomSpec",
    "PhantomTruth",
    "generate",
    "PuritySelection",
    "simplisma_init",
]

__version__ = "0.1.0"
