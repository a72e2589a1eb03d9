"""Batch command line: ``mcrmri <command> ...``.

Exit codes: 0 success, 2 input/config/format error, 3 numeric error,
4 convergence failure (diverged ALS or exhausted NNLS iterations).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .engine import DIVERGED
from .errors import ConfigError, ConvergenceError, FormatError, NumericError
from .ilt import FixedLambda, IltParams, ilt_solve, peaks, write_spectrum
from .numkit import svd_scan
from .phantom import PhantomSpec, generate, write_series
from .pipeline import RunConfig, load_stack, run_decomposition
from .results import load_result, save_result

log = logging.getLogger("mcrmri")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_CONVERGENCE = 4

RANK_CAVEAT = (
    "The suggestion is advisory: fit models with neighbouring component counts "
    "and keep a component only if it clearly improves the fit and is interpretable."
)


def _resolve_threads(n: int | None) -> int | None:
    if n is None:
        return None
    if n < 0:
        raise ConfigError("--threads must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    updates: dict = {}
    if getattr(args, "manifest", None):
        updates["manifest"] = args.manifest
    if getattr(args, "components", None) is not None:
        updates["n_components"] = args.components
    if args.out:
        updates["out_dir"] = args.out
    if updates:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **updates})
    threads = _resolve_threads(args.threads)
    if threads is not None:
        cfg = replace(cfg, als=replace(cfg.als, threads=threads))
    return cfg


def _out_dir(args: argparse.Namespace, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    stack, _ = load_stack(cfg)
    scan = svd_scan(stack.augmented())
    out = _out_dir(args, Path(cfg.out_dir or "."))
    (out / "rank_scan.csv").write_text(scan.to_csv())
    _dump(out / "rank_config.json", cfg.to_dict())
    shown = min(len(scan.singular_values), 10)
    for i, s in enumerate(scan.singular_values[:shown]):
        print(f"  sigma_{i + 1:<3d} {s:.6g}")
    print(f"noise floor: {scan.noise_floor:.6g}")
    print(f"suggested rank: {scan.suggested_rank}")
    print(RANK_CAVEAT)
    return EXIT_OK


def cmd_decompose(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if cfg.out_dir is None:
        raise ConfigError("decompose needs an output directory (--out or out_dir in config)")
    result, stack, masks, _ = run_decomposition(cfg)
    out = save_result(cfg.out_dir, result, stack, masks, non_process=cfg.non_process, als_options=cfg.als)
    _dump(out / "config.json", cfg.to_dict())
    d = result.diagnostics
    print(f"status: {result.status} after {result.n_iterations} iterations")
    print(f"explained variance: {d.explained_variance_pct:.4f} %")
    print(f"lack of fit: {d.lack_of_fit_pct:.4f} %")
    if result.status == DIVERGED:
        log.error("ALS diverged; best iterate written to %s", out)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _ilt_params(args: argparse.Namespace, cfg_ilt: IltParams) -> IltParams:
    if args.fixed_lambda is not None:
        return replace(cfg_ilt, lambda_policy=FixedLambda(args.fixed_lambda, relative=args.relative))
    return cfg_ilt


def cmd_ilt(args: argparse.Namespace) -> int:
    loaded = load_result(args.result_dir)
    cfg = RunConfig.load(args.config) if args.config else None
    params = _ilt_params(args, cfg.ilt if cfg else IltParams())
    k = loaded.result.n_components
    exempt = set(loaded.non_process) | set(cfg.non_process if cfg else ())
    if args.select:
        bad = [j for j in args.select if not 0 <= j < k]
        if bad:
            raise ConfigError(f"component indices {bad} outside 0..{k - 1}")
        chosen = list(args.select)
    else:
        chosen = [j for j in range(k) if j not in exempt]
    out = _out_dir(args, Path(args.result_dir) / "ilt")
    report = []
    for j in chosen:
        if j in exempt:
            if args.select:
                log.warning("component %d is flagged non-process; no ILT output written", j)
            else:
                log.info("component %d is non-process; skipped", j)
            continue
        spec = ilt_solve(loaded.result.S[:, j], loaded.echo_times_ms, params)
        write_spectrum(spec, out / f"spectrum_c{j}.csv")
        found = peaks(spec)
        report.append(
            {
                "component": j,
                "lambda_used": spec.lambda_used,
                "peaks": [
                    {"t2_ms": p.t2_ms, "amplitude": p.amplitude, "fraction_of_total": p.fraction_of_total}
                    for p in found
                ],
            }
        )
        desc = ", ".join(f"{p.t2_ms:.3g} ms ({100 * p.fraction_of_total:.1f} %)" for p in found)
        print(f"component {j}: {desc or 'no peaks'}")
    _dump(out / "peaks.json", {"components": report})
    _dump(out / "ilt_config.json", {"ilt": params.to_dict(), "components": chosen, "non_process": sorted(exempt)})
    return EXIT_OK


def cmd_profiles(args: argparse.Namespace) -> int:
    loaded = load_result(args.result_dir)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    a = cfg.analysis
    distances = tuple(args.distances) if args.distances else a.distances_mm
    center = tuple(args.center) if args.center else a.center
    single = args.single_pixel or a.single_pixel
    width = args.annulus_width if args.annulus_width is not None else a.annulus_width_px
    if loaded.result.constraints.normalize_S != "euclidean":
        log.warning("spectra are not normalised; concentrations are not comparable across components")
    result, stack = loaded.result, loaded.stack
    if center is None:
        center = analysis.estimate_center(loaded.masks[0])
    pixel_mm = stack.meta.pixel_size_mm[0]
    out = _out_dir(args, Path(args.result_dir) / "profiles")
    analysis.write_kinetics_csv(analysis.kinetic_profiles(result, stack), out / "kinetics.csv")
    for d in distances:
        series = analysis.radial_series(
            result, stack, center, d, pixel_mm, width, single_pixel=single
        )
        empty = int(np.sum(series[0].pixel_counts == 0))
        if empty:
            log.warning("distance %.3g mm: %d of %d frames have no pixels", d, empty, len(stack.blocks))
        analysis.write_radial_csv(series, out / f"radial_{d:.2f}mm.csv")
    _dump(
        out / "profiles_config.json",
        {
            "distances_mm": list(distances),
            "center": list(center),
            "annulus_width_px": width,
            "single_pixel": single,
            "pixel_size_mm": pixel_mm,
        },
    )
    print(f"profiles written to {out}")
    return EXIT_OK


def cmd_phantom(args: argparse.Namespace) -> int:
    doc: dict = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except FileNotFoundError:
            raise ConfigError(f"phantom spec not found: {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: malformed JSON: {exc}") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.snr is not None:
        doc["snr"] = args.snr
    spec = PhantomSpec.from_dict(doc)
    if not args.out:
        raise ConfigError("phantom needs --out DIR")
    frames, truth = generate(spec)
    manifest = write_series(frames, truth, args.out)
    print(manifest)
    return EXIT_OK


def cmd_export_maps(args: argparse.Namespace) -> int:
    loaded = load_result(args.result_dir)
    maps = analysis.distribution_maps(loaded.result, loaded.stack)
    frames = args.frames if args.frames else range(len(maps))
    out = _out_dir(args, Path(args.result_dir) / "maps")
    suffix = ".pgm" if args.format == "pgm16" else ".csv"
    for f in frames:
        if not 0 <= f < len(maps):
            raise ConfigError(f"frame {f} outside 0..{len(maps) - 1}")
        analysis.export_maps(maps[f], out / f"frame_{f:03d}{suffix}", args.format)
    print(f"maps written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    common.add_argument(
        "--threads", metavar="N", type=int, default=argparse.SUPPRESS,
        help="worker threads for the ALS concentration step (0 = all cores)",
    )
    common.add_argument(
        "--log-level", default=argparse.SUPPRESS,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity (default WARNING)",
    )
    common.add_argument("--log-file", metavar="PATH", default=argparse.SUPPRESS, help="also log to this file")

    parser = argparse.ArgumentParser(
        prog="mcrmri",
        description="Multiset MCR-ALS and T2 analysis of multi-echo MRI time series.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rank", parents=[common], help="singular value scree and rank suggestion")
    p.add_argument("manifest", nargs="?", help="series manifest (overrides the config)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("decompose", parents=[common], help="run the MCR-ALS pipeline")
    p.add_argument("--manifest", help="series manifest (overrides the config)")
    p.add_argument("-k", "--components", type=int, help="number of components")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ilt", parents=[common], help="T2 distributions of resolved spectra")
    p.add_argument("result_dir")
    p.add_argument("--select", type=int, nargs="+", metavar="J", help="component indices")
    p.add_argument("--fixed-lambda", type=float, help="use this lambda instead of the L-curve")
    p.add_argument("--relative", action="store_true", help="fixed lambda is a multiple of ||K||_2")
    p.set_defaults(func=cmd_ilt)

    p = sub.add_parser("profiles", parents=[common], help="kinetic and radial concentration profiles")
    p.add_argument("result_dir")
    p.add_argument("--distances", type=float, nargs="+", metavar="MM")
    p.add_argument("--center", type=float, nargs=2, metavar=("CX", "CY"), help="centre in pixels")
    p.add_argument("--annulus-width", type=float, metavar="PX")
    p.add_argument("--single-pixel", action="store_true")
    p.set_defaults(func=cmd_profiles)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic swelling series")
    p.add_argument("--spec", metavar="JSON", help="phantom parameters")
    p.add_argument("--seed", type=int)
    p.add_argument("--snr", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("export-maps", parents=[common], help="distribution maps as PGM16 or CSV")
    p.add_argument("result_dir")
    p.add_argument("--format", choices=["pgm16", "csv"], default="pgm16")
    p.add_argument("--frames", type=int, nargs="+", metavar="F")
    p.set_defaults(func=cmd_export_maps)
    return parser


def _setup_logging(level: str, log_file: str | None) -> None:
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(level)
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(err)
    if log_file:
        fh = logging.FileHandler(log_file)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("out", None), ("threads", None), ("log_level", "WARNING"), ("log_file", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    _setup_logging(args.log_level, args.log_file)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except ConvergenceError as exc:
        log.error("%s", exc)
        return EXIT_CONVERGENCE
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
