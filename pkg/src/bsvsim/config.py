"""Sectioned key-value experiment configuration.

Every key has a documented default (the apparatus defaults below), so an
empty file is a complete configuration.  Parsing is strict: unknown sections
or keys, unparsable values and violated invariants all raise
:class:`ConfigError` naming the offending ``section.key``.

    [crystal]    length_m, cut_angle_deg (blank = phase-matched), orientation_offset_deg, material
    [pump]       wavelength_nm, pulse_duration_ps, coherence_time_ps, bandwidth_thz (rad/ps FWHM)
    [detection]  eta, solid_angle_sr, acceptance_nm, beam_area_m2, gate_time_s, shape_area, shape_time
    [grid]       start_nm, stop_nm (blank = scenario default), step_nm
    [run]        frames, pulses_per_frame, modes, seed, gain
    [analysis]   normalization (nrf|max), fit_window_nm, fixed_wavelength_nm,
                 gain_min, gain_max, gain_step, gain_data, fit_weights
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .dispersion import CrystalConfig, PumpConfig
from .gain import DetectionGeometry


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class GridSpec:
    start_nm: float | None = None
    stop_nm: float | None = None
    step_nm: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    frames: int = 10000
    pulses_per_frame: int = 1000
    modes: int = 4
    seed: int = 0
    gain: float = 6.5


@dataclass(frozen=True)
class AnalysisConfig:
    normalization: str = "nrf"
    fit_window_nm: float = 2.0
    fixed_wavelength_nm: float = 702.4
    gain_min: float = 3.9
    gain_max: float = 6.5
    gain_step: float = 0.1
    gain_data: str = ""
    fit_weights: str = "uniform"


@dataclass(frozen=True)
class ExperimentConfig:
    crystal: CrystalConfig = field(default_factory=CrystalConfig)
    pump: PumpConfig = field(default_factory=PumpConfig)
    detection: DetectionGeometry = field(default_factory=DetectionGeometry)
    grid: GridSpec = field(default_factory=GridSpec)
    run: RunConfig = field(default_factory=RunConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


def _positive(x):
    return x > 0


def _optional(conv):
    def parse(text):
        return None if text.strip() == "" else conv(text)
    return parse


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> (file key, dataclass attribute, converter, check, check message)
_SCHEMA = {
    "crystal": (CrystalConfig, [
        ("length_m", "length", float, _positive, "must be > 0"),
        ("cut_angle_deg", "cut_angle", _optional(float), lambda x: x is None or 0 < x < 90,
         "must lie in (0, 90) or be blank"),
        ("orientation_offset_deg", "orientation_offset", float, None, ""),
        ("material", "material_table", str, None, ""),
    ]),
    "pump": (PumpConfig, [
        ("wavelength_nm", "wavelength", float, _positive, "must be > 0"),
        ("pulse_duration_ps", "pulse_duration", float, _positive, "must be > 0"),
        ("coherence_time_ps", "coherence_time", float, _positive, "must be > 0"),
        ("bandwidth_thz", "spectral_width", float, _positive, "must be > 0"),
    ]),
    "detection": (DetectionGeometry, [
        ("eta", "efficiency", float, lambda x: 0 < x <= 1, "must lie in (0, 1]"),
        ("solid_angle_sr", "solid_angle", float, _positive, "must be > 0"),
        ("acceptance_nm", "wavelength_acceptance", float, _positive, "must be > 0"),
        ("beam_area_m2", "beam_area", float, _positive, "must be > 0"),
        ("gate_time_s", "gate_time", float, _positive, "must be > 0"),
        ("shape_area", "shape_area", float, _positive, "must be > 0"),
        ("shape_time", "shape_time", float, _positive, "must be > 0"),
    ]),
    "grid": (GridSpec, [
        ("start_nm", "start_nm", _optional(float), lambda x: x is None or x > 0, "must be > 0"),
        ("stop_nm", "stop_nm", _optional(float), lambda x: x is None or x > 0, "must be > 0"),
        ("step_nm", "step_nm", float, _positive, "must be > 0"),
    ]),
    "run": (RunConfig, [
        ("frames", "frames", int, lambda x: x >= 2, "must be >= 2"),
        ("pulses_per_frame", "pulses_per_frame", int, lambda x: x >= 1, "must be >= 1"),
        ("modes", "modes", int, lambda x: x >= 1, "must be >= 1"),
        ("seed", "seed", int, lambda x: 0 <= x < 2**64, "must be an unsigned 64-bit integer"),
        ("gain", "gain", float, lambda x: x >= 0, "must be >= 0"),
    ]),
    "analysis": (AnalysisConfig, [
        ("normalization", "normalization", str, lambda x: x in ("nrf", "max"), "must be nrf or max"),
        ("fit_window_nm", "fit_window_nm", float, _positive, "must be > 0"),
        ("fixed_wavelength_nm", "fixed_wavelength_nm", float, _positive, "must be > 0"),
        ("gain_min", "gain_min", float, lambda x: x >= 0, "must be >= 0"),
        ("gain_max", "gain_max", float, lambda x: x >= 0, "must be >= 0"),
        ("gain_step", "gain_step", float, _positive, "must be > 0"),
        ("gain_data", "gain_data", str, None, ""),
        ("fit_weights", "fit_weights", str, lambda x: x in ("uniform", "relative"),
         "must be uniform or relative"),
    ]),
}


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(source, f"malformed configuration: {exc}") from None
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(section, "unknown section")
    parts = {}
    for section, (cls, keys) in _SCHEMA.items():
        known = {k[0] for k in keys}
        given = cp[section] if cp.has_section(section) else {}
        for key in given:
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown key")
        kwargs = {}
        for key, attr, conv, check, msg in keys:
            if key not in given:
                continue
            raw = given[key]
            try:
                value = conv(raw)
            except ValueError:
                raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r}") from None
            if check is not None and not check(value):
                raise ConfigError(f"{section}.{key}", f"{value!r} {msg}")
            kwargs[attr] = value
        try:
            parts[section] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from None
    cfg = ExperimentConfig(**parts)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig) -> None:
    g = cfg.grid
    if g.start_nm is not None and g.stop_nm is not None and g.stop_nm <= g.start_nm:
        raise ConfigError("grid.stop_nm", "must exceed grid.start_nm")
    a = cfg.analysis
    if a.gain_max < a.gain_min:
        raise ConfigError("analysis.gain_max", "must be >= analysis.gain_min")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "configuration file not found")
    return parse_config_text(path.read_text(), source=str(path))


def serialize(cfg: ExperimentConfig) -> str:
    """Full effective configuration, defaults resolved, in parseable form."""
    lines = []
    for section, (_, keys) in _SCHEMA.items():
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for key, attr, *_ in keys:
            lines.append(f"{key} = {_fmt(getattr(obj, attr))}")
        lines.append("")
    return "\n".join(lines)
