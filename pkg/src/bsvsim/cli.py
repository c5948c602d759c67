"""Command-line scenarios.

    bsvsim spectrum        per-mode spectrum and mode-density corrected spectrum
    bsvsim width-vs-gain   FWHM against gain, plus the low-gain sinc^2 limit
    bsvsim variance-scan   analytic difference-variance scan with Gaussian feature fits
    bsvsim covariance-map  analytic all-pairs covariance map
    bsvsim gain-fit        sinh^2 calibration fit of intensity against pump power
    bsvsim validate        Monte Carlo frames against closed-form plan moments

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config, serialize
from .dispersion import CrystalConfig, conjugate_wavelength
from .estimation import (
    empirical_covariance_map,
    empirical_variance_scan,
    fit_gain_curve,
    fit_gaussian_feature,
    gain_from_power,
)
from .frames import analytic_from_plan, build_pairing_plan, simulate_frames
from .gain import (
    SpectralGrid,
    WidthError,
    fwhm,
    gain_point,
    low_gain_spectrum,
    mode_count,
    mode_density_correction,
    skewness,
    spectrum,
    write_spectrum_csv,
)
from .photonstats import CorrelationKernel, covariance_map, variance_scan, write_map_csv, write_scan_csv

log = logging.getLogger("bsvsim")

SCENARIOS = ("spectrum", "width-vs-gain", "variance-scan", "covariance-map", "gain-fit", "validate")
DEFAULT_RANGES = {
    "spectrum": (560.0, 880.0),
    "width-vs-gain": (560.0, 880.0),
    "variance-scan": (700.0, 720.0),
    "covariance-map": (650.0, 760.0),
    "gain-fit": (650.0, 760.0),
    "validate": (650.0, 760.0),
}
COARSE_FACTOR = 5
SYNTHETIC_KAPPA = 0.65  # 1/sqrt(mW): 36-100 mW span G = 3.9-6.5
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VALIDATION = 0, 2, 3, 4
PASS_FRACTION = 0.99


class ValidationFailure(RuntimeError):
    pass


def make_grid(cfg: ExperimentConfig, scenario: str, coarse: bool = False) -> SpectralGrid:
    lo, hi = DEFAULT_RANGES[scenario]
    start = cfg.grid.start_nm if cfg.grid.start_nm is not None else lo
    stop = cfg.grid.stop_nm if cfg.grid.stop_nm is not None else hi
    if start <= cfg.pump.wavelength:
        raise ConfigError("grid.start_nm", "grid must lie above the pump wavelength")
    grid = SpectralGrid.from_range(start, stop, cfg.grid.step_nm)
    valid = cfg.crystal.table.validity_nm
    for key, lam in (("grid.start_nm", grid.centers[0]), ("grid.stop_nm", grid.centers[-1])):
        conj = conjugate_wavelength(lam, cfg.pump.wavelength)
        if not (valid[0] <= lam <= valid[1] and valid[0] <= conj <= valid[1]):
            raise ConfigError(key, f"{lam:g} nm or its conjugate {conj:.1f} nm lies outside the "
                                   f"dispersion validity [{valid[0]:g}, {valid[1]:g}] nm")
    if coarse:
        anchor = cfg.pump.degenerate_wavelength
        grid = grid.decimate(COARSE_FACTOR, anchor if grid.centers[0] <= anchor <= grid.centers[-1] else None)
    return grid


def make_kernel(cfg: ExperimentConfig, grid: SpectralGrid, G: float | None = None) -> CorrelationKernel:
    """Kernel in photons per frame: modes per bin = mode count per pulse times pulses."""
    G = cfg.run.gain if G is None else G
    N = spectrum(grid, G, cfg.crystal, cfg.pump)
    widen = grid.bin_width / cfg.grid.step_nm
    m = mode_count(cfg.detection, grid.centers,
                   acceptance_nm=cfg.detection.wavelength_acceptance * widen)
    return CorrelationKernel.from_pump(grid, N, m * cfg.run.pulses_per_frame, cfg.pump)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _write_manifest(out: Path, scenario: str, cfg: ExperimentConfig, coarse: bool, files) -> None:
    lines = [
        f"bsvsim {__version__}",
        f"scenario = {scenario}",
        f"seed = {cfg.run.seed}",
        f"coarse = {str(coarse).lower()}",
        f"config_sha256 = {cfg.digest}",
        "artifacts = " + ", ".join(sorted(files)),
        "",
        "# effective configuration",
        serialize(cfg),
    ]
    (out / "manifest.txt").write_text("\n".join(lines))


# --- scenarios ---------------------------------------------------------------------

def _spectrum(cfg, grid, out, **_):
    N = spectrum(grid, cfg.run.gain, cfg.crystal, cfg.pump)
    ref = cfg.pump.degenerate_wavelength
    m = mode_count(cfg.detection, grid.centers)
    raw = N * m / mode_count(cfg.detection, ref)  # detected shape, in degenerate-mode units
    corrected = mode_density_correction(raw, grid.centers, ref)
    write_spectrum_csv(out / "spectrum.csv", grid.centers, N, corrected)
    with (out / "spectrum_raw.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_nm", "raw"])
        for lam, r in zip(grid.centers, raw):
            w.writerow([f"{lam:.4f}", f"{r:.10e}"])
    summary = {
        "gain": cfg.run.gain,
        "peak_nm": float(grid.centers[np.argmax(N)]),
        "peak_n_per_mode": float(N.max()),
        "fwhm_nm": fwhm(N, grid.centers),
        "fwhm_raw_nm": fwhm(raw, grid.centers),
        "skewness_raw": skewness(raw, grid.centers),
        "skewness_corrected": skewness(corrected, grid.centers),
    }
    return summary, ["spectrum.csv", "spectrum_raw.csv"]


def _width_vs_gain(cfg, grid, out, **_):
    a = cfg.analysis
    gains = np.round(np.arange(a.gain_min, a.gain_max + a.gain_step / 2, a.gain_step), 10)
    no_offset = CrystalConfig(cfg.crystal.length, cfg.crystal.cut_angle, 0.0, cfg.crystal.material_table)
    low = fwhm(low_gain_spectrum(grid, cfg.crystal, cfg.pump), grid.centers)
    rows = []
    for G in gains:
        w = fwhm(spectrum(grid, G, cfg.crystal, cfg.pump), grid.centers)
        w0 = fwhm(spectrum(grid, G, no_offset, cfg.pump), grid.centers)
        rows.append((float(G), w, w0, w / low))
    with (out / "width_vs_gain.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["gain", "fwhm_nm", "fwhm_no_offset_nm", "ratio_to_low_gain"])
        wr.writerow(["0.0", f"{low:.6f}", "", "1.000000"])  # low-gain sinc^2 limit
        for G, w, w0, r in rows:
            wr.writerow([f"{G:.4f}", f"{w:.6f}", f"{w0:.6f}", f"{r:.6f}"])
    summary = {
        "fwhm_low_gain_nm": low,
        "fwhm_nm": {f"{G:.2f}": w for G, w, _, _ in rows},
        "ratio_max_to_min_gain": rows[-1][1] / rows[0][1],
        "ratio_max_gain_to_low_gain": rows[-1][3],
        "offset_shift_at_max_gain_nm": rows[-1][1] - rows[-1][2],
    }
    return summary, ["width_vs_gain.csv"]


def scan_features(scan, window: float, pump_nm: float) -> dict:
    """Gaussian fits to the auto dip, cross dip and degenerate peak of a scan."""
    x = scan.lambda_i
    y = scan.normalized
    keep = ~scan.artifact
    targets = {
        "auto_dip": ("dip", scan.fixed_nm),
        "cross_dip": ("dip", conjugate_wavelength(scan.fixed_nm, pump_nm)),
        "peak": ("peak", 2.0 * pump_nm),
    }
    fits = {}
    for name, (kind, center) in targets.items():
        try:
            res = fit_gaussian_feature(x, y, kind, window, center, keep)
            fits[name] = {"target_nm": float(center), **res.to_json()}
        except (ValueError, WidthError) as exc:
            fits[name] = {"target_nm": float(center), "error": str(exc)}
    p, c = fits["peak"].get("parameters"), fits["cross_dip"].get("parameters")
    if p and c:
        fits["peak_to_cross_width_ratio"] = p["fwhm"] / c["fwhm"]
    return fits


def _variance_scan(cfg, grid, out, **_):
    kernel = make_kernel(cfg, grid)
    a = cfg.analysis
    scan = variance_scan(a.fixed_wavelength_nm, kernel, cfg.detection.efficiency, a.normalization)
    write_scan_csv(out / "scan.csv", scan)
    summary = {
        "fixed_nm": scan.fixed_nm,
        "conjugate_nm": conjugate_wavelength(scan.fixed_nm, cfg.pump.wavelength),
        "normalization": a.normalization,
        "features": scan_features(scan, a.fit_window_nm, cfg.pump.wavelength),
    }
    return summary, ["scan.csv"]


def _covariance_map(cfg, grid, out, **_):
    kernel = make_kernel(cfg, grid)
    cov = covariance_map(kernel, cfg.detection.efficiency, normalize=True)
    write_map_csv(out / "covariance_map.csv", grid.centers, cov)
    off = cov - np.diag(np.diag(cov))
    i, j = np.unravel_index(np.argmax(off), off.shape)
    summary = {
        "bins": len(grid),
        "normalization": "global maximum",
        "max_offdiagonal": float(off[i, j]),
        "max_offdiagonal_at_nm": [float(grid.centers[i]), float(grid.centers[j])],
    }
    return summary, ["covariance_map.csv"]


def _read_gain_data(path) -> np.ndarray:
    rows = []
    with Path(path).open() as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if k == 0:
                    continue  # header
                raise ConfigError("analysis.gain_data", f"bad row {k + 1}: {row}") from None
    return np.array(rows)


def _gain_fit(cfg, grid, out, **_):
    a = cfg.analysis
    if a.gain_data:
        if not Path(a.gain_data).is_file():
            raise ConfigError("analysis.gain_data", f"file {a.gain_data!r} not found")
        data = _read_gain_data(a.gain_data)
        source = a.gain_data
    else:
        P = np.linspace((a.gain_min / SYNTHETIC_KAPPA) ** 2, (a.gain_max / SYNTHETIC_KAPPA) ** 2, 17)
        rng = np.random.default_rng(cfg.run.seed)
        I = np.sinh(SYNTHETIC_KAPPA * np.sqrt(P)) ** 2 * (1.0 + 0.05 * rng.standard_normal(P.size))
        data = np.column_stack([P, I])
        source = "synthetic"
    res = fit_gain_curve(data, weights=a.fit_weights)
    kappa = res["kappa"]
    G = gain_from_power(kappa, data[:, 0]) if res.converged else np.full(len(data), np.nan)
    with (out / "gain_fit.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["power", "intensity", "model", "gain"])
        for (p, i), g in zip(data, G):
            model = res["I0"] * np.sinh(kappa * np.sqrt(p)) ** 2
            w.writerow([f"{p:.6g}", f"{i:.10e}", f"{model:.10e}", f"{g:.6f}"])
    summary = {"source": source, "weights": a.fit_weights, "fit": res.to_json(),
               "gain_range": [float(np.min(G)), float(np.max(G))]}
    if not res.converged:
        raise RuntimeError("gain-curve fit did not converge")
    return summary, ["gain_fit.csv"]


def _zscores(diff, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.inf))
    return np.abs(z)


def _validate(cfg, grid, out, workers=1, **_):
    kernel = make_kernel(cfg, grid)
    gp = gain_point(grid, cfg.run.gain, cfg.crystal, cfg.pump)
    plan = build_pairing_plan(grid, kernel, gp, cfg.run.modes)
    eta = cfg.detection.efficiency
    pulses = cfg.run.pulses_per_frame
    log.info("plan: %d entries on %d bins; simulating %d frames", len(plan), len(grid), cfg.run.frames)
    fs = simulate_frames(plan, pulses, cfg.run.frames, eta, cfg.run.seed, workers=workers)
    fs.save(out / "frames.bin")
    fs.to_csv(out / "frames.csv")

    truth = analytic_from_plan(plan, eta, pulses)
    fixed = grid.index_of(cfg.analysis.fixed_wavelength_nm)
    emp = empirical_variance_scan(fs, fixed)
    var_true, _ = truth.variance_scan(fixed)
    z_scan = _zscores(emp.var_diff - var_true, emp.var_se)[~emp.artifact]

    F = fs.n_frames
    means = fs.frames.mean(axis=0)
    z_mean = _zscores(means - truth.means, fs.frames.std(axis=0, ddof=1) / np.sqrt(F))

    cmap = empirical_covariance_map(fs)
    iu = np.triu_indices(len(grid))
    z_map = _zscores(cmap.covariance[iu] - truth.covariance[iu], cmap.standard_error[iu])

    with (out / "validation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_nm", "mean_emp", "mean_analytic", "var_diff_emp", "var_diff_se",
                    "var_diff_analytic", "artifact_flag"])
        for k in range(len(grid)):
            w.writerow([f"{grid.centers[k]:.4f}", f"{means[k]:.10e}", f"{truth.means[k]:.10e}",
                        f"{emp.var_diff[k]:.10e}", f"{emp.var_se[k]:.10e}", f"{var_true[k]:.10e}",
                        int(emp.artifact[k])])
    checks = {}
    for name, z in (("means", z_mean), ("variance_scan", z_scan), ("covariance_map", z_map)):
        frac = float(np.mean(z <= 3.0))
        checks[name] = {"bins": int(z.size), "fraction_within_3sigma": frac,
                        "max_abs_z": float(np.max(z)), "pass": frac >= PASS_FRACTION}
    summary = {
        "plan_entries": len(plan),
        "plan_sha256": plan.digest.hex(),
        "frames": F,
        "pulses_per_frame": pulses,
        "fixed_nm": float(grid.centers[fixed]),
        "checks": checks,
        "pass": all(c["pass"] for c in checks.values()),
    }
    return summary, ["frames.bin", "frames.csv", "validation.csv"]


_RUNNERS = {
    "spectrum": _spectrum,
    "width-vs-gain": _width_vs_gain,
    "variance-scan": _variance_scan,
    "covariance-map": _covariance_map,
    "gain-fit": _gain_fit,
    "validate": _validate,
}


def run_scenario(name: str, cfg: ExperimentConfig, output_dir, workers: int = 1,
                 coarse: bool = False) -> int:
    """Run one scenario and write its artifacts, summary.json and manifest.txt."""
    if name not in _RUNNERS:
        raise ConfigError("scenario", f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = make_grid(cfg, name, coarse)
    summary, files = _RUNNERS[name](cfg, grid, out, workers=workers)
    summary = {"scenario": name, "version": __version__, "grid": {
        "start_nm": float(grid.centers[0]), "stop_nm": float(grid.centers[-1]),
        "bin_width_nm": grid.bin_width, "bins": len(grid)}, **summary}
    _write_json(out / "summary.json", summary)
    _write_manifest(out, name, cfg, coarse, files + ["summary.json"])
    if name == "validate" and not summary["pass"]:
        raise ValidationFailure("Monte Carlo frames disagree with the closed-form plan moments")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsvsim", description=__doc__.split("\n")[0])
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", type=Path, help="INI configuration file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override run.seed (unsigned 64-bit)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--workers", type=int, default=1, help="worker processes for frame simulation")
    p.add_argument("--coarse", action="store_true", help=f"decimate the grid by {COARSE_FACTOR}")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            cfg = _with_seed(cfg, args.seed)
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        return run_scenario(args.scenario, cfg, args.out, args.workers, args.coarse)
    except ConfigError as exc:
        print(f"bsvsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationFailure as exc:
        print(f"bsvsim: validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"bsvsim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, run=replace(cfg.run, seed=seed))


if __name__ == "__main__":
    sys.exit(main())
