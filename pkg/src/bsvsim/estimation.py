"""Curve fitting and frame-based estimators.

The least-squares solver is a small damped Gauss-Newton loop with analytic
Jacobians; the two model families here (sinh^2 gain curve, Gaussian feature)
have four parameters at most.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .photonstats import FOUR_LN2

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


class WindowError(ValueError):
    pass


@dataclass
class FitResult:
    parameters: dict[str, float]
    standard_errors: dict[str, float]
    residual_norm: float
    iterations: int
    converged: bool
    low_significance: bool = False
    covariance: np.ndarray | None = field(default=None, repr=False)

    def __getitem__(self, name):
        return self.parameters[name]

    def to_json(self) -> dict:
        return {
            "parameters": {k: float(v) for k, v in self.parameters.items()},
            "standard_errors": {k: float(v) for k, v in self.standard_errors.items()},
            "residual_norm": float(self.residual_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "low_significance": bool(self.low_significance),
        }


def gauss_newton(residual, jacobian, x0, xtol=1e-10, gtol=1e-8, max_iter=200, min_step=1e-12,
                 g_scale=None):
    """Minimise ||residual(x)||^2 by Gauss-Newton with step halving.

    Returns ``(x, iterations, converged)``.  Convergence needs both a relative
    parameter change below ``xtol`` and a column-scaled gradient below ``gtol``
    times ``g_scale`` (the norm of the data being fitted; defaults to the
    starting residual norm).
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = r @ r
    if not np.isfinite(cost):
        return x, 0, False
    g_ref = gtol * max(np.sqrt(cost) if g_scale is None else g_scale, 1e-300)
    for it in range(1, max_iter + 1):
        J = jacobian(x)
        scale = np.linalg.norm(J, axis=0)
        scale[scale == 0] = 1.0
        step = -np.linalg.lstsq(J / scale, r, rcond=None)[0] / scale
        if np.all(np.abs(step) < xtol * np.maximum(np.abs(x), 1e-300)):
            return x, it, _stationary(J, r, scale, g_ref)
        alpha = 1.0
        while True:
            x_new = x + alpha * step
            r_new = residual(x_new)
            cost_new = r_new @ r_new
            if np.isfinite(cost_new) and cost_new <= cost:
                break
            alpha *= 0.5
            if alpha < min_step:
                return x, it, _stationary(J, r, scale, g_ref)
        change = np.abs(alpha * step) / np.maximum(np.abs(x_new), 1e-300)
        x, r, cost = x_new, r_new, cost_new
        if np.all(change < xtol):
            return x, it, _stationary(jacobian(x), r, scale, g_ref)
    return x, max_iter, False


def _stationary(J, r, scale, g_ref) -> bool:
    return bool(np.linalg.norm((J / scale).T @ r) <= g_ref)


def _covariance(J, r, n_params):
    dof = max(r.size - n_params, 1)
    sigma2 = (r @ r) / dof
    return np.linalg.pinv(J.T @ J) * sigma2


# --- gain calibration -------------------------------------------------------

def gain_model(P, I0, kappa):
    return I0 * np.sinh(kappa * np.sqrt(P)) ** 2


def fit_gain_curve(points, weights: str = "uniform") -> FitResult:
    """Fit I = I0 sinh^2(kappa sqrt(P)) to (P, I) pairs.

    Starts from a straight-line fit of ln I against sqrt(P) over the upper half
    of the powers, where sinh^2 x ~ e^{2x}/4.  ``weights="relative"`` divides
    residuals by the data (constant relative errors).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise InsufficientDataError("fit_gain_curve needs at least 3 (P, I) points")
    P, I = pts[:, 0], pts[:, 1]
    if np.unique(P).size != P.size:
        raise ValueError("pump powers must be distinct")
    if np.any(I < 0) or np.any(P < 0):
        raise ValueError("powers and intensities must be non-negative")
    names = ("I0", "kappa")
    nan = {k: float("nan") for k in names}

    order = np.argsort(P)
    tail = order[P.size // 2:]
    tail = tail[I[tail] > 0]
    if tail.size < 2:
        return FitResult(dict(nan), dict(nan), float(np.linalg.norm(I)), 0, False)
    slope, intercept = np.polyfit(np.sqrt(P[tail]), np.log(I[tail]), 1)
    x0 = np.array([4.0 * np.exp(intercept), max(slope / 2.0, 1e-12)])

    if weights == "uniform":
        w = np.ones_like(I)
    elif weights == "relative":
        if np.any(I == 0):
            raise ValueError("relative weights need strictly positive intensities")
        w = 1.0 / I
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    sq = np.sqrt(P)

    def residual(x):
        return w * (gain_model(P, x[0], x[1]) - I)

    def jacobian(x):
        s = np.sinh(x[1] * sq)
        return np.column_stack([w * s**2, w * x[0] * np.sinh(2.0 * x[1] * sq) * sq])

    x, iters, ok = gauss_newton(residual, jacobian, x0, g_scale=np.linalg.norm(w * I))
    r = residual(x)
    cov = _covariance(jacobian(x), r, 2)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    ok = ok and np.all(np.isfinite(x)) and x[1] > 0
    if not ok:
        log.warning("gain-curve fit did not converge after %d iterations", iters)
    return FitResult(dict(zip(names, map(float, x))), dict(zip(names, map(float, se))),
                     float(np.linalg.norm(r)), iters, bool(ok), covariance=cov)


def gain_from_power(kappa: float, P):
    """Parametric gain G = kappa * sqrt(P)."""
    if kappa < 0 or np.any(np.asarray(P) < 0):
        raise ValueError("kappa and P must be non-negative")
    return kappa * np.sqrt(P)


# --- Gaussian features ------------------------------------------------------

def gaussian(x, center, fwhm, amplitude, baseline):
    return baseline + amplitude * np.exp(-FOUR_LN2 * (x - center) ** 2 / fwhm**2)


def fit_gaussian_feature(x, curve, feature: str = "peak", window: float | None = None,
                         center: float | None = None, mask=None) -> FitResult:
    """Fit baseline + amplitude * exp(-4 ln2 (x - c)^2 / w^2) to a peak or a dip.

    Dips are fitted as peaks of the negated curve; the returned amplitude
    carries the sign of the feature.  ``window`` is the full width (same units
    as ``x``) around ``center`` (default: the global extremum); ``mask`` drops
    points such as artifact bins.
    """
    if feature not in ("peak", "dip"):
        raise ValueError("feature must be 'peak' or 'dip'")
    x = np.asarray(x, dtype=float)
    y = np.asarray(curve, dtype=float)
    keep = np.ones(x.size, bool) if mask is None else np.array(mask, bool)
    sign = 1.0 if feature == "peak" else -1.0
    z = sign * y
    if center is None:
        center = x[keep][np.argmax(z[keep])]
    if window is not None:
        keep &= np.abs(x - center) <= window / 2 + 1e-9
    xs, zs = x[keep], z[keep]
    if xs.size < 5:
        raise WindowError("fit window must contain at least 5 bins")
    k = int(np.argmax(zs))
    if k == 0 or k == xs.size - 1:
        raise WindowError("feature extremum lies on the window edge")

    edges = np.concatenate([zs[:2], zs[-2:]])
    base0 = float(np.median(edges))
    amp0 = float(zs[k] - base0)
    above = xs[zs - base0 >= amp0 / 2]
    spacing = float(np.min(np.diff(xs)))
    width0 = max(float(above.max() - above.min()), spacing) if amp0 > 0 else spacing
    x0 = np.array([xs[k], width0, amp0, base0])

    def residual(p):
        return gaussian(xs, *p) - zs

    def jacobian(p):
        c, w, a, _ = p
        e = np.exp(-FOUR_LN2 * (xs - c) ** 2 / w**2)
        return np.column_stack([
            a * e * 2 * FOUR_LN2 * (xs - c) / w**2,
            a * e * 2 * FOUR_LN2 * (xs - c) ** 2 / w**3,
            e,
            np.ones_like(xs),
        ])

    p, iters, ok = gauss_newton(residual, jacobian, x0, g_scale=np.linalg.norm(zs))
    r = residual(p)
    cov = _covariance(jacobian(p), r, 4)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    p[1] = abs(p[1])
    names = ("center", "fwhm", "amplitude", "baseline")
    params = dict(zip(names, map(float, p)))
    errors = dict(zip(names, map(float, se)))
    params["amplitude"] *= sign
    params["baseline"] *= sign
    low = not (p[2] > 0 and p[2] > 3.0 * se[2])
    return FitResult(params, errors, float(np.linalg.norm(r)), iters, bool(ok), low, cov)


# --- frame estimators ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScanEstimate:
    lambda_i: np.ndarray
    nrf: np.ndarray
    nrf_se: np.ndarray
    var_diff: np.ndarray
    var_se: np.ndarray
    mean_s: np.ndarray
    mean_i: np.ndarray
    artifact: np.ndarray
    n_frames: int
    fixed_bin: int
    normalization: str = "nrf"

    @property
    def normalized(self) -> np.ndarray:
        if self.normalization == "nrf":
            return self.nrf
        return self.var_diff / self.var_diff.max()


def _counts(frames) -> np.ndarray:
    counts = getattr(frames, "frames", frames)
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2 or counts.shape[0] < 2:
        raise InsufficientDataError("need at least 2 frames")
    return counts


def _jackknife_se(loo: np.ndarray) -> np.ndarray:
    n = loo.shape[0]
    return np.sqrt((n - 1) / n * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))


def empirical_variance_scan(frames, fixed_bin: int, wavelengths=None,
                            normalization: str = "nrf") -> ScanEstimate:
    """Sample variance of (counts[fixed] - counts[j]) over frames, for every bin j,
    with leave-one-frame-out jackknife errors."""
    X = _counts(frames)
    F, B = X.shape
    if not 0 <= fixed_bin < B:
        raise IndexError("fixed bin outside the frame width")
    if wavelengths is None:
        grid = getattr(frames, "grid", None)
        wavelengths = grid.centers if grid is not None else np.arange(B, dtype=float)
    D = X[:, [fixed_bin]] - X
    D = D - D.mean(axis=0)
    s2 = np.sum(D**2, axis=0)
    var = s2 / (F - 1)
    means = X.mean(axis=0)
    # leave-one-out variance of centred data: (S2 - d_k^2 F/(F-1)) / (F-2)
    var_loo = (s2 - D**2 * F / (F - 1)) / max(F - 2, 1)
    mean_loo = (X.sum(axis=0) - X) / (F - 1)
    denom = mean_loo[:, [fixed_bin]] + mean_loo
    with np.errstate(invalid="ignore", divide="ignore"):
        nrf = var / (means[fixed_bin] + means)
        nrf_loo = var_loo / denom
    var[fixed_bin] = 0.0
    nrf[fixed_bin] = 0.0
    var_se = _jackknife_se(var_loo)
    nrf_se = _jackknife_se(nrf_loo)
    var_se[fixed_bin] = nrf_se[fixed_bin] = 0.0
    artifact = np.zeros(B, bool)
    artifact[fixed_bin] = True
    return ScanEstimate(np.asarray(wavelengths, float), nrf, nrf_se, var, var_se,
                        np.full(B, means[fixed_bin]), means, artifact, F, fixed_bin, normalization)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    covariance: np.ndarray
    standard_error: np.ndarray
    n_frames: int
    normalization: float = 1.0

    @property
    def normalized(self) -> np.ndarray:
        return self.covariance / self.normalization


def empirical_covariance_map(frames, normalize: bool = False) -> CovarianceEstimate:
    """Unbiased sample covariance of all bin pairs, with closed-form jackknife errors."""
    X = _counts(frames)
    F = X.shape[0]
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (F - 1)
    cov = 0.5 * (cov + cov.T)
    if F > 2:
        # jackknife of the covariance reduces to the spread of the products x_k y_k
        sq = Xc**2
        spread = sq.T @ sq - (Xc.T @ Xc) ** 2 / F
        se = np.sqrt(np.clip(F / ((F - 1) * (F - 2) ** 2) * spread, 0.0, None))
    else:
        se = np.full_like(cov, np.nan)
    norm = float(np.abs(cov).max()) if normalize else 1.0
    if norm == 0:
        norm = 1.0
    return CovarianceEstimate(cov, se, F, norm)
