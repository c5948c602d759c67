"""Monte Carlo detector frames from exact squeezed-vacuum photon statistics.

A :class:`PairingPlan` lists the squeezed modes feeding the spectral bins:
two-mode entries (TMSV) bind a signal bin to its conjugate bin, single-mode
entries (SMSV) sit on the diagonal around degeneracy.  Entries whose
conjugate falls outside the grid keep only their observed arm.

Frames integrate ``pulses_per_frame`` pulses.  Sums of independent geometric
draws are negative binomial, and binomial thinning commutes with summation,
so the default ``method="aggregate"`` draws one negative binomial and two
binomials per entry and frame; ``method="per_mode"`` runs the literal
pulse-by-pulse, mode-by-mode loop through :func:`sample_tmsv`,
:func:`sample_smsv` and :func:`thin`.

Every frame owns a Philox stream keyed by ``(seed, frame index)`` and entries
are held in canonical order, so results do not depend on worker count or on
the order entries were supplied in.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln, ndtr

from .gain import GainPoint, SpectralGrid
from .photonstats import CorrelationKernel, angular_frequency

TMSV = "TMSV"
SMSV = "SMSV"
MAGIC = b"BSVF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQQIQ32s")
_COUNT_LIMIT = 2**62


class PlanError(ValueError):
    """Invalid or empty pairing plan."""


@dataclass(frozen=True, order=True)
class PlanEntry:
    bin_i: int
    bin_j: int | None
    multiplicity: int
    n_per_mode: float
    kind: str = TMSV

    def __post_init__(self):
        if self.multiplicity < 1:
            raise PlanError("multiplicity must be >= 1")
        if self.n_per_mode < 0:
            raise PlanError("photon number per mode must be non-negative")
        if self.kind == SMSV and self.bin_j != self.bin_i:
            raise PlanError("SMSV entries live on a single bin")
        if self.kind == TMSV and self.bin_j == self.bin_i:
            raise PlanError("TMSV entries need two distinct bins")
        if self.kind not in (TMSV, SMSV):
            raise PlanError(f"unknown entry kind {self.kind!r}")

    @property
    def key(self) -> tuple:
        return (self.kind, self.bin_i, -1 if self.bin_j is None else self.bin_j)

    @property
    def pair_count(self) -> float:
        """Number of signal-idler pairs; a single-mode entry holds half a pair per mode."""
        return self.multiplicity / 2.0 if self.kind == SMSV else float(self.multiplicity)


@dataclass(frozen=True, eq=False)
class PairingPlan:
    grid: SpectralGrid
    entries: tuple[PlanEntry, ...]
    degenerate_bin: int | None = None

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.key))
        if not entries:
            raise PlanError("pairing plan is empty")
        keys = [e.key for e in entries]
        if len(set(keys)) != len(keys):
            raise PlanError("duplicate plan entries")
        B = len(self.grid)
        for e in entries:
            if not 0 <= e.bin_i < B or (e.bin_j is not None and not 0 <= e.bin_j < B):
                raise PlanError(f"entry {e} refers to a bin off the grid")
            if e.kind == TMSV and e.bin_j is not None and e.bin_j < e.bin_i:
                raise PlanError("two-mode entries are stored once, with bin_i < bin_j")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @functools.cached_property
    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.asarray(self.grid.centers, "<f8").tobytes())
        h.update(struct.pack("<d", self.grid.bin_width))
        for e in self.entries:
            h.update(f"{e.kind}|{e.bin_i}|{e.bin_j}|{e.multiplicity}|{e.n_per_mode!r};".encode())
        return h.digest()

    def _arrays(self, kind):
        sel = [e for e in self.entries if e.kind == kind]
        bi = np.array([e.bin_i for e in sel], dtype=np.intp)
        bj = np.array([-1 if e.bin_j is None else e.bin_j for e in sel], dtype=np.intp)
        mult = np.array([e.multiplicity for e in sel], dtype=np.int64)
        n = np.array([e.n_per_mode for e in sel], dtype=float)
        return bi, bj, mult, n


# --- plan construction ----------------------------------------------------------

def _psi(t):
    # antiderivative of the standard normal CDF
    return t * ndtr(t) + np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)


def frequency_edges(grid: SpectralGrid) -> tuple[np.ndarray, np.ndarray]:
    lo_nm, hi_nm = grid.edges
    return angular_frequency(hi_nm), angular_frequency(lo_nm)


def pair_overlap(grid: SpectralGrid, pump_omega: float, pump_width: float) -> np.ndarray:
    """D[i, j] = integral over bin i and bin j of the sum-frequency density.

    The density is a unit-area Gaussian in (w_s + w_i - w_p) with FWHM
    ``pump_width``; D is symmetric and each row sums to the frequency width of
    its bin minus whatever pairs with frequencies off the grid.
    """
    a, b = frequency_edges(grid)
    sigma = pump_width / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    A, Bj = a[:, None], b[:, None]
    return sigma * (_psi((Bj + b[None, :] - pump_omega) / sigma)
                    - _psi((A + b[None, :] - pump_omega) / sigma)
                    - _psi((Bj + a[None, :] - pump_omega) / sigma)
                    + _psi((A + a[None, :] - pump_omega) / sigma))


def build_pairing_plan(grid: SpectralGrid, kernel: CorrelationKernel, gain_point: GainPoint,
                       modes_per_pair: int, floor: float = 1e-3) -> PairingPlan:
    """Discretise the pump-envelope pairing into squeezed-mode entries.

    ``modes_per_pair`` (M) is the number of frequency modes a bin holds at the
    degenerate wavelength; pair weights are overlaps in units of that bin's
    frequency width, and multiplicities are round(M * weight).
    """
    if modes_per_pair < 1:
        raise PlanError("modes per conjugate pair must be >= 1")
    if kernel.grid != grid:
        raise PlanError("kernel and plan must share the grid")
    N = np.asarray(gain_point.n_per_mode, dtype=float)
    if N.shape != (len(grid),):
        raise PlanError("gain point and plan must share the grid")

    a, b = frequency_edges(grid)
    ref_lam = 2.0 * np.pi * 299792.458 / (kernel.pump_omega / 2.0)
    ref_width = float(angular_frequency(ref_lam - grid.bin_width / 2)
                      - angular_frequency(ref_lam + grid.bin_width / 2))
    D = pair_overlap(grid, kernel.pump_omega, kernel.pump_width)
    w = D / ref_width
    w_off = np.clip((b - a) - D.sum(axis=1), 0.0, None) / ref_width
    degenerate = kernel.degenerate_index

    entries = []
    B = len(grid)
    for i in range(B):
        if w[i, i] >= floor and (m := int(round(modes_per_pair * w[i, i]))) >= 1:
            entries.append(PlanEntry(i, i, m, float(N[i]), SMSV))
        for j in range(i + 1, B):
            if w[i, j] >= floor and (m := int(round(modes_per_pair * w[i, j]))) >= 1:
                entries.append(PlanEntry(i, j, m, float(np.sqrt(N[i] * N[j])), TMSV))
        if w_off[i] >= floor and (m := int(round(modes_per_pair * w_off[i]))) >= 1:
            entries.append(PlanEntry(i, None, m, float(N[i]), TMSV))
    if not entries:
        raise PlanError("no pair weight above the floor; lower the floor or raise M")
    return PairingPlan(grid, tuple(entries), degenerate)


# --- samplers ----------------------------------------------------------------------

def sample_tmsv(N: float, rng: np.random.Generator, size=None):
    """Photon pair (n, n) of a two-mode squeezed vacuum; n is geometric with mean N."""
    if N < 0:
        raise ValueError("N must be non-negative")
    if N == 0:
        n = np.zeros(size, dtype=np.int64) if size is not None else 0
        return n, n
    u = 1.0 - rng.random(size)  # (0, 1]
    n = np.floor(np.log(u) / np.log(N / (N + 1.0))).astype(np.int64)
    if size is None:
        n = int(n)
    return n, n


@functools.lru_cache(maxsize=64)
def smsv_cdf(N: float, tail: float = 1e-12) -> np.ndarray:
    """Cumulative P(n <= 2k) of single-mode squeezed vacuum, k = 0, 1, ...

    P(2k) = (2k)! / (2^k k!)^2 tanh^{2k} r / cosh r with sinh^2 r = N, tabulated
    until the cumulative probability reaches 1 - ``tail``.
    """
    if N == 0:
        return np.ones(1)
    t = N / (N + 1.0)  # tanh^2 r
    log_t = np.log(t)
    log_norm = 0.5 * np.log1p(-t)
    cdf = []
    total = 0.0
    k0 = 0
    chunk = 1024
    while True:
        k = np.arange(k0, k0 + chunk)
        logp = gammaln(k + 0.5) - gammaln(0.5) - gammaln(k + 1.0) + k * log_t + log_norm
        c = total + np.cumsum(np.exp(logp))
        cdf.append(c)
        total = c[-1]
        if total >= 1.0 - tail:
            break
        k0 += chunk
        chunk *= 2
    cdf = np.concatenate(cdf)
    stop = int(np.searchsorted(cdf, 1.0 - tail)) + 1
    return cdf[:stop]


def smsv_pmf(N: float, n_max: int) -> np.ndarray:
    """P(n) for n = 0..n_max (odd entries are zero)."""
    p = np.zeros(n_max + 1)
    if N == 0:
        p[0] = 1.0
        return p
    t = N / (N + 1.0)
    k = np.arange(n_max // 2 + 1)
    p[2 * k] = np.exp(gammaln(k + 0.5) - gammaln(0.5) - gammaln(k + 1.0) + k * np.log(t)
                      + 0.5 * np.log1p(-t))
    return p


def sample_smsv(N: float, rng: np.random.Generator, size=None):
    """Even photon numbers of single-mode squeezed vacuum by table inverse CDF."""
    if N < 0:
        raise ValueError("N must be non-negative")
    cdf = smsv_cdf(float(N))
    u = rng.random(size)
    k = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    n = 2 * np.asarray(k, dtype=np.int64)
    return int(n) if size is None else n


def thin(n, eta: float, rng: np.random.Generator):
    """Binomial detection loss: keep each photon with probability eta."""
    if not 0 < eta <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    if eta == 1:
        return n
    return rng.binomial(n, eta)


# --- simulation ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameSet:
    frames: np.ndarray
    pulses_per_frame: int
    seed: int
    plan_digest: bytes
    grid: SpectralGrid | None = None

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("a frame set needs at least one frame")
        if np.any(self.frames < 0):
            raise ValueError("counts must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def save(self, path) -> None:
        if self.frames.max(initial=0) > np.iinfo(np.uint32).max:
            raise OverflowError("counts exceed the 32-bit range of the frame file format")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, self.n_frames, self.n_bins,
                              self.pulses_per_frame, self.seed, self.plan_digest)
        with Path(path).open("wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.frames, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path, grid: SpectralGrid | None = None) -> FrameSet:
        data = Path(path).read_bytes()
        magic, version, F, B, pulses, seed, digest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a frame file")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported frame file version {version}")
        counts = np.frombuffer(data, dtype="<u4", count=F * B, offset=_HEADER.size)
        return cls(counts.reshape(F, B).astype(np.int64), pulses, seed, digest, grid)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if self.grid is not None:
                writer.writerow(["frame"] + [f"{w:.4f}" for w in self.grid.centers])
            else:
                writer.writerow(["frame"] + [f"bin{j}" for j in range(self.n_bins)])
            for k, row in enumerate(self.frames):
                writer.writerow([k] + row.tolist())


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(frame,))))


def _simulate_block(plan: PairingPlan, pulses: int, eta: float, seed: int, start: int, stop: int,
                    method: str) -> np.ndarray:
    B = len(plan.grid)
    out = np.zeros((stop - start, B), dtype=np.int64)
    ti, tj, tm, tn = plan._arrays(TMSV)
    si, _, sm, sn = plan._arrays(SMSV)
    observed = tj >= 0
    for row, frame in enumerate(range(start, stop)):
        rng = frame_rng(seed, frame)
        acc = out[row]
        if method == "aggregate":
            if ti.size:
                total = rng.negative_binomial(tm * pulses, 1.0 / (1.0 + tn))
                np.add.at(acc, ti, thin(total, eta, rng))
                arm_j = thin(total, eta, rng)
                np.add.at(acc, tj[observed], arm_j[observed])
            if si.size:
                # k ~ NB(1/2, 1/cosh^2 r) per mode, so K modes give NB(K/2, .)
                k = rng.negative_binomial(sm * pulses / 2.0, 1.0 / (1.0 + sn))
                np.add.at(acc, si, thin(2 * k, eta, rng))
        else:
            for _ in range(pulses):
                for e in plan.entries:
                    if e.kind == TMSV:
                        n_s, n_i = sample_tmsv(e.n_per_mode, rng, e.multiplicity)
                        acc[e.bin_i] += int(np.sum(thin(n_s, eta, rng)))
                        if e.bin_j is not None:
                            acc[e.bin_j] += int(np.sum(thin(n_i, eta, rng)))
                    else:
                        n = sample_smsv(e.n_per_mode, rng, e.multiplicity)
                        acc[e.bin_i] += int(np.sum(thin(n, eta, rng)))
        if acc.max(initial=0) >= _COUNT_LIMIT:
            raise OverflowError(f"frame {frame}: count accumulator overflow")
    return out


def simulate_frames(plan: PairingPlan, pulses_per_frame: int, frames: int, eta: float, seed: int,
                    workers: int = 1, method: str = "aggregate") -> FrameSet:
    """Integrated per-bin counts for ``frames`` frames of ``pulses_per_frame`` pulses."""
    if pulses_per_frame < 1 or frames < 1:
        raise ValueError("pulses per frame and frame count must be positive")
    if not 0 < eta <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    if method not in ("aggregate", "per_mode"):
        raise ValueError("method must be 'aggregate' or 'per_mode'")
    workers = max(1, min(int(workers), frames))
    if workers == 1:
        counts = _simulate_block(plan, pulses_per_frame, eta, seed, 0, frames, method)
    else:
        bounds = np.linspace(0, frames, workers + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_simulate_block, [plan] * workers, [pulses_per_frame] * workers,
                             [eta] * workers, [seed] * workers, bounds[:-1], bounds[1:],
                             [method] * workers)
            counts = np.concatenate(list(parts), axis=0)
    return FrameSet(counts, pulses_per_frame, seed, plan.digest, plan.grid)


# --- closed-form moments ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PlanMoments:
    """Exact per-frame means and covariance (shot noise included) of a plan."""

    grid: SpectralGrid
    means: np.ndarray
    covariance: np.ndarray

    def variance_scan(self, fixed_bin: int):
        c = self.covariance
        var = c[fixed_bin, fixed_bin] + np.diag(c) - 2.0 * c[fixed_bin]
        var[fixed_bin] = 0.0
        var = np.maximum(var, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            nrf = var / (self.means[fixed_bin] + self.means)
        return var, nrf

    def covariance_map(self, normalize: bool = False) -> np.ndarray:
        if normalize:
            return self.covariance / np.abs(self.covariance).max()
        return self.covariance.copy()


def analytic_from_plan(plan: PairingPlan, eta: float, pulses_per_frame: int = 1) -> PlanMoments:
    """Sum closed-form per-entry moments (geometric / single-mode squeezed, binomial loss)."""
    if not 0 < eta <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    B = len(plan.grid)
    means = np.zeros(B)
    cov = np.zeros((B, B))
    for e in plan.entries:
        K = e.multiplicity * pulses_per_frame
        N = e.n_per_mode
        mean = eta * K * N
        if e.kind == TMSV:
            arm_var = K * (eta**2 * N**2 + eta * N)
            means[e.bin_i] += mean
            cov[e.bin_i, e.bin_i] += arm_var
            if e.bin_j is not None:
                means[e.bin_j] += mean
                cov[e.bin_j, e.bin_j] += arm_var
                shared = eta**2 * K * (N**2 + N)
                cov[e.bin_i, e.bin_j] += shared
                cov[e.bin_j, e.bin_i] += shared
        else:
            means[e.bin_i] += mean
            cov[e.bin_i, e.bin_i] += K * (2 * eta**2 * N**2 + eta**2 * N + eta * N)
    return PlanMoments(plan.grid, means, cov)
