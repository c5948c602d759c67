"""Closed-form second-order statistics of multimode bright squeezed vacuum.

Every pair of spectral bins (a, b) carries a normalised intensity correlation

    g2(a, b) = 1 + auto(a, b) + (1 + 1/N_ab) * cross(a, b)

with Gaussian envelopes in the frequency difference (``auto``, thermal
correlations within a mode) and in the sum-frequency detuning from the pump
(``cross``, signal-idler pairing).  At the degenerate bin both terms peak and
g2 = 3 + 1/N.  Excess correlations are divided by the number of modes m that
a bin collects, and binomial loss leaves g2 - 1 unchanged while scaling means.

Frequencies are angular, in rad/ps; wavelengths in nm.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dispersion import PumpConfig
from .gain import SpectralGrid

C_NM_PER_PS = 299792.458
FOUR_LN2 = 4.0 * np.log(2.0)


class ConsistencyError(ArithmeticError):
    """Second-moment inputs that violate Cauchy-Schwarz."""


def angular_frequency(wavelength_nm):
    return 2.0 * np.pi * C_NM_PER_PS / np.asarray(wavelength_nm, dtype=float)


def bandwidth_from_wavelength(width_nm: float, center_nm: float) -> float:
    """Angular-frequency FWHM (rad/ps) equivalent to ``width_nm`` at ``center_nm``."""
    return float(angular_frequency(center_nm - width_nm / 2) - angular_frequency(center_nm + width_nm / 2))


def wavelength_from_bandwidth(width: float, center_nm: float) -> float:
    return float(width * center_nm**2 / (2.0 * np.pi * C_NM_PER_PS))


@dataclass(frozen=True, eq=False)
class CorrelationKernel:
    """Pump envelope plus per-bin photon numbers per mode and mode counts."""

    grid: SpectralGrid
    n_per_mode: np.ndarray
    modes: np.ndarray
    pump_omega: float
    pump_width: float
    auto_width: float | None = None

    def __post_init__(self):
        n = np.broadcast_to(np.asarray(self.n_per_mode, dtype=float), (len(self.grid),)).copy()
        m = np.broadcast_to(np.asarray(self.modes, dtype=float), (len(self.grid),)).copy()
        if not self.pump_width > 0:
            raise ValueError("pump width must be positive")
        if np.any(n <= 0) or np.any(m <= 0):
            raise ValueError("photon numbers and mode counts must be positive on every bin")
        object.__setattr__(self, "n_per_mode", n)
        object.__setattr__(self, "modes", m)
        if self.auto_width is None:
            object.__setattr__(self, "auto_width", self.pump_width)

    @classmethod
    def from_pump(cls, grid, n_per_mode, modes, pump: PumpConfig, auto_width=None):
        return cls(grid, n_per_mode, modes, float(angular_frequency(pump.wavelength)),
                   pump.spectral_width, auto_width)

    @property
    def omega(self) -> np.ndarray:
        return angular_frequency(self.grid.centers)

    def _index(self, wavelength_nm) -> int:
        return self.grid.index_of(wavelength_nm)

    def auto_excess(self, i, j):
        d = self.omega[i] - self.omega[j]
        return np.exp(-FOUR_LN2 * d**2 / self.auto_width**2)

    def cross_envelope(self, i, j):
        d = self.omega[i] + self.omega[j] - self.pump_omega
        return np.exp(-FOUR_LN2 * d**2 / self.pump_width**2)

    def pair_photons(self, i, j):
        return np.sqrt(self.n_per_mode[i] * self.n_per_mode[j])

    def g2(self, i, j):
        """Total normalised correlation between bins i and j (indices, broadcastable)."""
        cross = (1.0 + 1.0 / self.pair_photons(i, j)) * self.cross_envelope(i, j)
        return 1.0 + self.auto_excess(i, j) + cross

    def g2_matrix(self) -> np.ndarray:
        idx = np.arange(len(self.grid))
        return self.g2(idx[:, None], idx[None, :])

    @property
    def degenerate_index(self) -> int | None:
        lam = 2.0 * np.pi * C_NM_PER_PS / (self.pump_omega / 2.0)
        try:
            return self.grid.index_of(lam)
        except ValueError:
            return None


@dataclass(frozen=True)
class StatsPoint:
    mean_s: float
    mean_i: float
    variance_diff: float
    covariance: float
    nrf: float
    var_s: float | None = None
    var_i: float | None = None


def g2_auto(lam_a: float, lam_b: float, kernel: CorrelationKernel) -> float:
    """Thermal intensity correlation, 2 at lam_a == lam_b, falling to 1."""
    i, j = kernel._index(lam_a), kernel._index(lam_b)
    return float(1.0 + kernel.auto_excess(i, j))


def g2_cross(lam_s: float, lam_i: float, kernel: CorrelationKernel) -> float:
    """Signal-idler correlation, 2 + 1/N at exact conjugation."""
    i, j = kernel._index(lam_s), kernel._index(lam_i)
    return float(1.0 + (1.0 + 1.0 / kernel.pair_photons(i, j)) * kernel.cross_envelope(i, j))


def g2_degenerate(N: float) -> float:
    """Single-mode squeezed vacuum: g2 = 3 + 1/N."""
    if not N > 0:
        raise ValueError("mean photon number must be positive")
    return 3.0 + 1.0 / N


def variance_difference(Ns, Ni, g2ss, g2ii, g2si, m=1.0, m_i=None, rtol: float = 1e-9):
    """Var(Ns - Ni) for beams collecting ``m`` modes each.

    ``Ns`` and ``Ni`` are mean photon numbers summed over the modes.  When the
    arms collect different mode numbers pass ``m`` for the signal and ``m_i``
    for the idler; the cross term then uses their geometric mean.
    """
    Ns = np.asarray(Ns, dtype=float)
    Ni = np.asarray(Ni, dtype=float)
    m_s = np.asarray(m, dtype=float)
    m_i = m_s if m_i is None else np.asarray(m_i, dtype=float)
    m_si = np.sqrt(m_s * m_i)
    excess_s = (np.asarray(g2ss) - 1.0) / m_s * Ns**2
    excess_i = (np.asarray(g2ii) - 1.0) / m_i * Ni**2
    cross = 2.0 * (np.asarray(g2si) - 1.0) / m_si * Ns * Ni
    var = excess_s + excess_i - cross + (Ns + Ni)
    scale = excess_s + excess_i + cross + Ns + Ni
    if np.any(var < -rtol * np.maximum(scale, 1.0)):
        raise ConsistencyError("negative difference variance: inputs violate Cauchy-Schwarz")
    # anything within rounding of the cancelled terms is an exact zero
    var = np.where(var <= 8 * np.finfo(float).eps * scale, 0.0, var)
    return var if var.ndim else float(var)


def apply_loss(value, eta: float, statistic: str = "mean"):
    """Effect of binomial detection loss on a statistic.

    ``mean`` and ``shot-term`` scale linearly with eta, ``excess-correlation``
    (g2 - 1) is invariant.
    """
    if not 0 < eta <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    if statistic in ("mean", "shot-term"):
        return np.asarray(value) * eta if np.ndim(value) else value * eta
    if statistic == "excess-correlation":
        return value
    raise ValueError(f"unknown statistic {statistic!r}")


def paired_difference_variance(N: float, eta: float) -> float:
    """Residual Var(n_s - n_i) of a perfectly correlated pair after loss: 2 eta (1 - eta) N."""
    eta = apply_loss(1.0, eta)
    return 2.0 * eta * (1.0 - eta) * N


def bin_means(kernel: CorrelationKernel, eta: float = 1.0) -> np.ndarray:
    return apply_loss(kernel.modes * kernel.n_per_mode, eta)


def covariance(lam_s: float, lam_i: float, kernel: CorrelationKernel, eta: float = 1.0) -> float:
    """Excess covariance (g2 - 1) <N_s><N_i> / m between two bins."""
    i, j = kernel._index(lam_s), kernel._index(lam_i)
    m = np.sqrt(kernel.modes[i] * kernel.modes[j])
    means = bin_means(kernel, eta)
    return float((kernel.g2(i, j) - 1.0) / m * means[i] * means[j])


def covariance_map(kernel: CorrelationKernel, eta: float = 1.0, normalize: bool = False,
                   shot_noise: bool = True) -> np.ndarray:
    """All-pairs covariance; with ``shot_noise`` the diagonal holds full bin variances."""
    means = bin_means(kernel, eta)
    m_pair = np.sqrt(np.outer(kernel.modes, kernel.modes))
    cov = (kernel.g2_matrix() - 1.0) / m_pair * np.outer(means, means)
    if shot_noise:
        cov[np.diag_indices_from(cov)] += means
    if normalize:
        cov = cov / np.abs(cov).max()
    return cov


def stats_point(lam_s: float, lam_i: float, kernel: CorrelationKernel, eta: float = 1.0) -> StatsPoint:
    i, j = kernel._index(lam_s), kernel._index(lam_i)
    cov = covariance_map(kernel, eta)
    means = bin_means(kernel, eta)
    var = max(cov[i, i] + cov[j, j] - 2.0 * cov[i, j], 0.0) if i != j else 0.0
    return StatsPoint(float(means[i]), float(means[j]), float(var), float(cov[i, j]),
                      float(var / (means[i] + means[j])), float(cov[i, i]), float(cov[j, j]))


@dataclass(frozen=True, eq=False)
class VarianceScan:
    lambda_i: np.ndarray
    nrf: np.ndarray
    var_diff: np.ndarray
    mean_s: np.ndarray
    mean_i: np.ndarray
    artifact: np.ndarray
    fixed_nm: float
    normalization: str = "nrf"

    @property
    def normalized(self) -> np.ndarray:
        if self.normalization == "nrf":
            return self.nrf
        return self.var_diff / self.var_diff.max()


def variance_scan(fixed_nm: float, kernel: CorrelationKernel, eta: float = 1.0,
                  normalization: str = "nrf") -> VarianceScan:
    """Difference variance between a fixed bin and every bin of the grid."""
    if normalization not in ("nrf", "max"):
        raise ValueError("normalization must be 'nrf' or 'max'")
    s = kernel._index(fixed_nm)
    idx = np.arange(len(kernel.grid))
    means = bin_means(kernel, eta)
    g2 = kernel.g2_matrix()
    var = variance_difference(means[s], means, g2[s, s], np.diag(g2), g2[s, :],
                              m=kernel.modes[s], m_i=kernel.modes)
    var = np.where(idx == s, 0.0, var)
    nrf = var / (means[s] + means)
    return VarianceScan(kernel.grid.centers.copy(), nrf, var, np.full(idx.size, means[s]),
                        means, idx == s, float(kernel.grid.centers[s]), normalization)


def write_scan_csv(path, scan) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda_i_nm", "nrf", "var_diff", "mean_s", "mean_i", "artifact_flag"])
        for k in range(len(scan.lambda_i)):
            writer.writerow([f"{scan.lambda_i[k]:.4f}", f"{scan.nrf[k]:.10e}",
                             f"{scan.var_diff[k]:.10e}", f"{scan.mean_s[k]:.10e}",
                             f"{scan.mean_i[k]:.10e}", int(bool(scan.artifact[k]))])


def write_map_csv(path, wavelengths, matrix) -> None:
    """Dense matrix with wavelengths in the first row and column."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda_nm"] + [f"{w:.4f}" for w in wavelengths])
        for w, row in zip(wavelengths, matrix):
            writer.writerow([f"{w:.4f}"] + [f"{v:.8e}" for v in row])
