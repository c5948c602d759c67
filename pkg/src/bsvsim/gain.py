"""Per-mode photon number versus gain and mismatch, spectra, widths and mode counting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from .dispersion import CrystalConfig, PumpConfig, phase_mismatch


class WidthError(ValueError):
    """A curve whose full width at half maximum cannot be resolved."""


@dataclass(frozen=True, eq=False)
class SpectralGrid:
    """Uniform wavelength bins; ``centers`` in nm."""

    centers: np.ndarray
    bin_width: float = 0.2

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim != 1 or centers.size < 3:
            raise ValueError("a spectral grid needs at least 3 bins")
        steps = np.diff(centers)
        if np.any(steps <= 0):
            raise ValueError("grid centers must be strictly increasing")
        if not np.allclose(steps, self.bin_width, rtol=0, atol=1e-6 * self.bin_width):
            raise ValueError("grid spacing must equal the bin width")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @classmethod
    def from_range(cls, start: float, stop: float, step: float = 0.2) -> SpectralGrid:
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        centers = np.round(start + step * np.arange(n), 9)
        return cls(centers, step)

    def __len__(self):
        return self.centers.size

    def __eq__(self, other):
        return (isinstance(other, SpectralGrid) and self.bin_width == other.bin_width
                and np.array_equal(self.centers, other.centers))

    def __hash__(self):
        return hash((self.bin_width, self.centers.tobytes()))

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.bin_width
        return self.centers - half, self.centers + half

    def index_of(self, wavelength_nm: float) -> int:
        """Bin whose interval contains ``wavelength_nm`` (ties go to the lower bin)."""
        lo, hi = self.edges
        if not lo[0] <= wavelength_nm <= hi[-1]:
            raise ValueError(
                f"{wavelength_nm} nm is off the grid [{lo[0]:.4f}, {hi[-1]:.4f}] nm"
            )
        return int(np.clip(np.argmin(np.abs(self.centers - wavelength_nm)), 0, len(self) - 1))

    def decimate(self, factor: int, anchor_nm: float | None = None) -> SpectralGrid:
        """Coarser grid of every ``factor``-th bin, keeping the bin nearest ``anchor_nm``."""
        if factor <= 1:
            return self
        start = 0 if anchor_nm is None else self.index_of(anchor_nm) % factor
        return SpectralGrid(self.centers[start::factor], self.bin_width * factor)


@dataclass(frozen=True, eq=False)
class GainPoint:
    G: float
    n_per_mode: np.ndarray

    def __post_init__(self):
        if self.G < 0:
            raise ValueError("gain must be non-negative")
        if np.any(np.asarray(self.n_per_mode) < 0):
            raise ValueError("photon numbers must be non-negative")


@dataclass(frozen=True)
class DetectionGeometry:
    """Collection geometry.  Defaults give a few transverse and longitudinal modes per pulse
    at 709 nm: ~0.17 deg aperture, 0.2 nm resolution, ~0.5 mm beam, 18 ps gate."""

    solid_angle: float = 6.9e-6        # sr
    wavelength_acceptance: float = 0.2  # nm
    beam_area: float = 2.0e-7          # m^2
    gate_time: float = 18e-12          # s
    efficiency: float = 0.2
    shape_area: float = 1.0
    shape_time: float = 1.0

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError("quantum efficiency must lie in (0, 1]")
        for name in ("solid_angle", "wavelength_acceptance", "beam_area", "gate_time",
                     "shape_area", "shape_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def detection_volume(self) -> float:
        return self.beam_area * SPEED_OF_LIGHT * self.gate_time


def mode_photon_number(G, delta):
    """Mean photons per mode, |G sinh(tau)/tau|^2 with tau^2 = G^2 - delta^2.

    ``delta`` is the half mismatch Delta k L / 2.  Past delta = G the sinh
    continues to sin, so the low-gain limit is G^2 sinc^2(delta).
    """
    G = np.asarray(G, dtype=float)
    delta = np.asarray(delta, dtype=float)
    t2 = G * G - delta * delta
    tau = np.sqrt(np.abs(t2))
    small = tau < 1e-6
    safe = np.where(small, 1.0, tau)
    ratio = np.where(t2 >= 0, np.sinh(safe), np.sin(safe)) / safe
    # sinh(tau)/tau and sin|tau|/|tau| share one series in tau^2 near tau = 0
    ratio = np.where(small, 1.0 + t2 / 6.0 + t2 * t2 / 120.0, ratio)
    out = (G * ratio) ** 2
    return out if out.ndim else float(out)


def half_mismatch(grid: SpectralGrid, crystal: CrystalConfig, pump: PumpConfig) -> np.ndarray:
    return phase_mismatch(grid.centers, crystal, pump) * crystal.length / 2.0


def spectrum(grid: SpectralGrid, G: float, crystal: CrystalConfig | None = None,
             pump: PumpConfig | None = None) -> np.ndarray:
    crystal = crystal or CrystalConfig()
    pump = pump or PumpConfig()
    return mode_photon_number(G, half_mismatch(grid, crystal, pump))


def gain_point(grid: SpectralGrid, G: float, crystal=None, pump=None) -> GainPoint:
    return GainPoint(G, spectrum(grid, G, crystal, pump))


def low_gain_spectrum(grid: SpectralGrid, crystal=None, pump=None) -> np.ndarray:
    """Shape of the G -> 0 spectrum, sinc^2(delta), peak-normalised to 1 at delta = 0."""
    crystal = crystal or CrystalConfig()
    pump = pump or PumpConfig()
    return np.sinc(half_mismatch(grid, crystal, pump) / np.pi) ** 2


def fwhm(curve, wavelengths) -> float:
    """Full width at half of (max - min), linearly interpolated between bins."""
    y = np.asarray(curve, dtype=float)
    x = np.asarray(wavelengths, dtype=float)
    y = y - y.min()
    peak = int(np.argmax(y))
    if y[peak] <= 0:
        raise WidthError("flat curve has no resolvable width")
    if peak == 0 or peak == y.size - 1:
        raise WidthError("maximum lies on the grid edge")
    half = 0.5 * y[peak]
    left = np.nonzero(y[:peak] <= half)[0]
    right = np.nonzero(y[peak:] <= half)[0]
    if left.size == 0 or right.size == 0:
        raise WidthError("curve does not fall to half maximum on both sides")
    i = left[-1]
    j = peak + right[0]
    x_left = x[i] + (half - y[i]) / (y[i + 1] - y[i]) * (x[i + 1] - x[i])
    x_right = x[j - 1] + (half - y[j - 1]) / (y[j] - y[j - 1]) * (x[j] - x[j - 1])
    return float(x_right - x_left)


def mode_density_correction(raw, wavelengths, ref_nm: float | None = None, pump: PumpConfig | None = None):
    """Multiply a detected spectrum by (lambda/lambda_ref)^4.

    The number of modes collected per solid angle and wavelength interval falls
    as lambda^-4; undoing it leaves the photon number per mode.
    """
    lam = np.asarray(wavelengths, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelengths must be positive")
    if ref_nm is None:
        ref_nm = (pump or PumpConfig()).degenerate_wavelength
    return np.asarray(raw, dtype=float) * (lam / ref_nm) ** 4


def mode_count(geom: DetectionGeometry, wavelength_nm, acceptance_nm=None, solid_angle=None):
    """Number of modes m = V_det / V_coh in the collected volume.

    S_coh = a_s lambda^2 / dOmega and t_coh = a_t lambda^2 / (c dlambda), so
    m is proportional to dOmega * dlambda / lambda^4.
    """
    dl = (geom.wavelength_acceptance if acceptance_nm is None else acceptance_nm) * 1e-9
    d_omega = geom.solid_angle if solid_angle is None else solid_angle
    lam = np.asarray(wavelength_nm, dtype=float) * 1e-9
    if np.any(lam <= 0) or dl <= 0 or d_omega <= 0:
        raise ValueError("mode_count needs positive wavelength, bandwidth and solid angle")
    s_coh = geom.shape_area * lam**2 / d_omega
    t_coh = geom.shape_time * lam**2 / (SPEED_OF_LIGHT * dl)
    m = geom.detection_volume / (s_coh * SPEED_OF_LIGHT * t_coh)
    return m if m.ndim else float(m)


def skewness(values, wavelengths) -> float:
    """Standardised third moment of a spectrum treated as a distribution over wavelength."""
    w = np.asarray(values, dtype=float)
    x = np.asarray(wavelengths, dtype=float)
    w = w / w.sum()
    mu = np.sum(w * x)
    var = np.sum(w * (x - mu) ** 2)
    return float(np.sum(w * (x - mu) ** 3) / var**1.5)


def write_spectrum_csv(path, wavelengths, n_per_mode, n_corrected) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda_nm", "n_per_mode", "n_corrected"])
        for row in zip(wavelengths, n_per_mode, n_corrected):
            writer.writerow([f"{row[0]:.4f}", f"{row[1]:.10e}", f"{row[2]:.10e}"])
