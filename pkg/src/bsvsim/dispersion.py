"""Refractive indices and collinear type-I phase matching.

Dispersion coefficients are read from plain-text tables shipped in
``bsvsim/data``.  Each table has one section per polarization with the
coefficients of

    n^2(lambda) = A + B / (lambda^2 - C) - D * lambda^2      (lambda in um)

and a mandatory ``validity_nm = lo,hi`` line.

Wavelengths are vacuum wavelengths in nm throughout; wavevector mismatch is
returned in 1/m.
"""

from __future__ import annotations

import configparser
import functools
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

DEFAULT_MATERIAL = "bbo_eimerl1987"
_COEFFS = ("A", "B", "C", "D")


class DispersionRangeError(ValueError):
    """Wavelength outside the validity interval of a dispersion table."""


class NoPhaseMatchingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Polarization:
    A: float
    B: float
    C: float
    D: float
    validity_nm: tuple[float, float]

    def index(self, wavelength_nm):
        lam = np.asarray(wavelength_nm, dtype=float)
        lo, hi = self.validity_nm
        if np.any(lam < lo) or np.any(lam > hi):
            bad = lam[(lam < lo) | (lam > hi)] if lam.ndim else lam
            raise DispersionRangeError(
                f"wavelength {np.min(bad):g} nm outside validity interval [{lo:g}, {hi:g}] nm"
            )
        l2 = (lam * 1e-3) ** 2
        return np.sqrt(self.A + self.B / (l2 - self.C) - self.D * l2)


@dataclass(frozen=True)
class DispersionTable:
    name: str
    source: str
    version: str
    ordinary: Polarization
    extraordinary: Polarization
    material: str = ""

    @property
    def validity_nm(self) -> tuple[float, float]:
        lo = max(self.ordinary.validity_nm[0], self.extraordinary.validity_nm[0])
        hi = min(self.ordinary.validity_nm[1], self.extraordinary.validity_nm[1])
        return lo, hi


def parse_table(text: str, name: str = "<string>") -> DispersionTable:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text, source=name)
    sections = {}
    for section in ("ordinary", "extraordinary"):
        if not cp.has_section(section):
            raise ValueError(f"{name}: missing section [{section}]")
        sec = cp[section]
        if "validity_nm" not in sec:
            raise ValueError(f"{name}: [{section}] lacks the mandatory validity_nm line")
        lo, hi = (float(v) for v in sec["validity_nm"].split(","))
        if not 0 < lo < hi:
            raise ValueError(f"{name}: [{section}] validity_nm must satisfy 0 < lo < hi")
        try:
            coeffs = {k: float(sec[k]) for k in _COEFFS}
        except KeyError as exc:
            raise ValueError(f"{name}: [{section}] missing coefficient {exc}") from None
        sections[section] = Polarization(validity_nm=(lo, hi), **coeffs)
    meta = cp["meta"] if cp.has_section("meta") else {}
    table = DispersionTable(
        name=name,
        source=meta.get("source", ""),
        version=meta.get("version", ""),
        material=meta.get("material", ""),
        **sections,
    )
    # tables must describe a dielectric (n > 1) everywhere they claim validity
    lo, hi = table.validity_nm
    probe = np.linspace(lo, hi, 257)
    for pol in (table.ordinary, table.extraordinary):
        if np.any(pol.index(probe) <= 1.0):
            raise ValueError(f"{name}: n(lambda) <= 1 inside the validity range")
    return table


@functools.lru_cache(maxsize=None)
def load_table(material: str = DEFAULT_MATERIAL) -> DispersionTable:
    """Load a shipped table by name, or any table file by path."""
    path = Path(material)
    if path.suffix and path.exists():
        return parse_table(path.read_text(), name=path.stem)
    res = resources.files("bsvsim") / "data" / f"{material}.dat"
    if not res.is_file():
        raise ValueError(f"unknown dispersion table {material!r}")
    return parse_table(res.read_text(), name=material)


@dataclass(frozen=True)
class CrystalConfig:
    """Type-I crystal.  ``cut_angle=None`` means phase-matched at 2*lambda_p."""

    length: float = 2e-3
    cut_angle: float | None = None
    orientation_offset: float = 0.0025
    material_table: str = DEFAULT_MATERIAL

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("crystal length must be positive")
        if self.cut_angle is not None and not 0 < self.cut_angle < 90:
            raise ValueError("cut angle must lie in (0, 90) degrees")
        load_table(self.material_table)

    @property
    def table(self) -> DispersionTable:
        return load_table(self.material_table)


@dataclass(frozen=True)
class PumpConfig:
    """Pump parameters.  ``spectral_width`` is an angular-frequency FWHM in rad/ps ("THz")."""

    wavelength: float = 354.7
    pulse_duration: float = 18.0
    coherence_time: float = 5.0
    spectral_width: float = 1.25

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("pump wavelength must be positive")
        if not self.spectral_width > 0:
            raise ValueError("pump spectral width must be positive")
        if self.coherence_time > self.pulse_duration:
            raise ValueError("coherence time cannot exceed the pulse duration")

    @property
    def degenerate_wavelength(self) -> float:
        return 2.0 * self.wavelength


def refractive_index(table: DispersionTable, wavelength_nm, ray: str = "o", theta: float = 0.0):
    """Index of the ordinary ray, or of the extraordinary ray at ``theta`` degrees
    from the optic axis (index ellipse)."""
    n_o = table.ordinary.index(wavelength_nm)
    if ray in ("o", "ordinary"):
        return n_o
    if ray not in ("e", "extraordinary"):
        raise ValueError(f"unknown ray {ray!r}")
    if not 0 <= theta <= 90:
        raise ValueError("theta must lie in [0, 90] degrees")
    n_e = table.extraordinary.index(wavelength_nm)
    t = np.radians(theta)
    return 1.0 / np.sqrt(np.cos(t) ** 2 / n_o**2 + np.sin(t) ** 2 / n_e**2)


def conjugate_wavelength(signal_nm, pump_nm: float):
    """Idler wavelength from energy conservation 1/ls + 1/li = 1/lp."""
    ls = np.asarray(signal_nm, dtype=float)
    if np.any(ls <= pump_nm):
        raise ValueError(
            f"signal wavelength must exceed the pump wavelength {pump_nm} nm "
            "(idler frequency would be non-positive)"
        )
    li = 1.0 / (1.0 / pump_nm - 1.0 / ls)
    return li if li.ndim else float(li)


def _mismatch(signal_nm, theta: float, table: DispersionTable, pump_nm: float):
    ls = np.asarray(signal_nm, dtype=float)
    li = conjugate_wavelength(ls, pump_nm)
    k_p = refractive_index(table, pump_nm, "e", theta) / (pump_nm * 1e-9)
    # sum of the two lower-frequency terms is written symmetrically in s and i
    k_si = table.ordinary.index(ls) / (ls * 1e-9) + table.ordinary.index(li) / (li * 1e-9)
    return 2.0 * np.pi * (k_p - k_si)


def effective_angle(crystal: CrystalConfig, pump: PumpConfig) -> float:
    cut = crystal.cut_angle if crystal.cut_angle is not None else find_phasematching_angle(crystal, pump)
    return cut + crystal.orientation_offset


def phase_mismatch(signal_nm, crystal: CrystalConfig, pump: PumpConfig):
    """Collinear mismatch k_p - k_s - k_i in 1/m, at cut angle plus orientation offset."""
    theta = effective_angle(crystal, pump)
    return _mismatch(signal_nm, theta, crystal.table, pump.wavelength)


def find_phasematching_angle(crystal: CrystalConfig, pump: PumpConfig, tol: float = 1e-6,
                             bracket: tuple[float, float] = (0.0, 90.0)) -> float:
    """Cut angle (degrees) giving zero mismatch at the degenerate wavelength.

    Bisection on the sign of the mismatch; the offset of ``crystal`` is ignored.
    """
    return _phasematch_angle(crystal.material_table, pump.wavelength, tol, bracket)


@functools.lru_cache(maxsize=64)
def _phasematch_angle(material: str, pump_nm: float, tol: float, bracket: tuple[float, float]) -> float:
    table = load_table(material)
    lam = 2.0 * pump_nm

    def f(theta):
        return float(_mismatch(lam, theta, table, pump_nm))

    lo, hi = bracket
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise NoPhaseMatchingError(
            f"no type-I phase matching for pump {pump_nm} nm in [{lo}, {hi}] degrees"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
