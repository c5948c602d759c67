import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import dblquad
from scipy.stats import chisquare

from bsvsim import frames as fr
from bsvsim.frames import (
    SMSV,
    TMSV,
    FrameSet,
    PairingPlan,
    PlanEntry,
    PlanError,
    analytic_from_plan,
    build_pairing_plan,
    frequency_edges,
    pair_overlap,
    sample_smsv,
    sample_tmsv,
    simulate_frames,
    smsv_pmf,
    thin,
)
from bsvsim.gain import GainPoint, SpectralGrid, gain_point
from bsvsim.photonstats import CorrelationKernel, angular_frequency, variance_difference

DRAWS = 1_000_000
WP = float(angular_frequency(354.7))


def batch_g2(n, batches=100):
    """g2 = <n(n-1)>/<n>^2 with a batch-means standard error."""
    n = np.asarray(n, dtype=float)
    vals = [np.mean(b * (b - 1)) / np.mean(b) ** 2 for b in np.array_split(n, batches)]
    g2 = np.mean(n * (n - 1)) / np.mean(n) ** 2
    return g2, np.std(vals, ddof=1) / np.sqrt(batches)


def batch_cross_g2(a, b, batches=100):
    a, b = np.asarray(a, float), np.asarray(b, float)
    vals = [np.mean(x * y) / (x.mean() * y.mean())
            for x, y in zip(np.array_split(a, batches), np.array_split(b, batches))]
    return np.mean(a * b) / (a.mean() * b.mean()), np.std(vals, ddof=1) / np.sqrt(batches)


@pytest.fixture(scope="module")
def small_grid():
    return SpectralGrid.from_range(700.0, 701.0, 0.5)


def toy_plan(grid, entries):
    return PairingPlan(grid, tuple(entries))


# --- samplers ---------------------------------------------------------------------

def test_tmsv_vacuum(rng):
    n_s, n_i = sample_tmsv(0.0, rng, 100)
    assert not n_s.any() and not n_i.any()
    assert sample_tmsv(0.0, rng) == (0, 0)


def test_tmsv_moments(rng):
    N = 5.0
    n_s, n_i = sample_tmsv(N, rng, DRAWS)
    assert np.array_equal(n_s, n_i)
    se = math.sqrt((N**2 + N) / DRAWS)
    assert abs(n_s.mean() - N) < 3 * se
    # cross correlation <n_s n_i>/<n_s><n_i> = 1 + Var/mean^2
    g2, g2_se = batch_cross_g2(n_s, n_i)
    assert abs(g2 - (2 + 1 / N)) < 3 * g2_se
    # each arm alone is thermal
    g2, g2_se = batch_g2(n_s)
    assert abs(g2 - 2.0) < 3 * g2_se


def test_tmsv_pmf_is_geometric(rng):
    N = 1.5
    n, _ = sample_tmsv(N, rng, DRAWS)
    k = np.arange(12)
    expected = N**k / (1 + N) ** (k + 1)
    observed = np.bincount(n, minlength=k.size)[: k.size] / DRAWS
    se = np.sqrt(expected * (1 - expected) / DRAWS)
    assert np.all(np.abs(observed - expected) < 4 * se)


def test_smsv_even_and_vacuum_probability(rng):
    n = sample_smsv(1.0, rng, DRAWS)
    assert np.all(n % 2 == 0)
    p0 = 1 / math.cosh(math.asinh(1.0))
    assert p0 == pytest.approx(1 / math.sqrt(2))
    assert abs(np.mean(n == 0) - p0) < 3 * math.sqrt(p0 * (1 - p0) / DRAWS)
    assert sample_smsv(0.0, rng) == 0


def test_smsv_g2(rng):
    n = sample_smsv(2.0, rng, DRAWS)
    g2, se = batch_g2(n)
    assert abs(g2 - 3.5) < 3 * se


@pytest.mark.parametrize("N", [0.1, 1.0, 10.0])
def test_smsv_chi_squared(N):
    rng = np.random.default_rng(int(N * 1000) + 7)
    n = sample_smsv(N, rng, DRAWS)
    k = n // 2
    kmax = int(k.max())
    p = smsv_pmf(N, 2 * kmax)[::2]
    observed = np.bincount(k, minlength=kmax + 1).astype(float)
    expected = p * DRAWS
    # pool the tail so every cell expects at least 5 counts
    cut = int(np.argmax(expected < 5)) if np.any(expected < 5) else expected.size
    obs = np.append(observed[:cut], observed[cut:].sum())
    exp = np.append(expected[:cut], DRAWS - expected[:cut].sum())
    assert chisquare(obs, exp).pvalue > 1e-3


def test_smsv_pmf_against_closed_form():
    N = 2.0
    r = math.asinh(math.sqrt(N))
    p = smsv_pmf(N, 20)
    for k in range(11):
        direct = math.factorial(2 * k) / (2**k * math.factorial(k)) ** 2 * math.tanh(r) ** (2 * k) / math.cosh(r)
        assert p[2 * k] == pytest.approx(direct, rel=1e-12)
        if k < 10:
            assert p[2 * k + 1] == 0
    cdf = fr.smsv_cdf(N)
    assert cdf[-1] >= 1 - 1e-12 and cdf[-2] < 1 - 1e-12


def test_samplers_reject_negative_mean(rng):
    with pytest.raises(ValueError):
        sample_tmsv(-1.0, rng)
    with pytest.raises(ValueError):
        sample_smsv(-1.0, rng)


def test_thin(rng):
    assert thin(17, 1.0, rng) == 17
    assert thin(0, 0.3, rng) == 0
    draws = thin(np.full(DRAWS, 100), 0.2, rng)
    assert abs(draws.mean() - 20) < 3 * math.sqrt(16 / DRAWS)
    assert draws.var() == pytest.approx(16, rel=0.02)
    with pytest.raises(ValueError):
        thin(5, 0.0, rng)


@pytest.mark.parametrize("eta", [0.3, 0.7, 1.0])
def test_thinning_keeps_g2_of_a_mode(eta):
    rng = np.random.default_rng(99)
    n, _ = sample_tmsv(4.0, rng, DRAWS)
    g2, se = batch_g2(thin(n, eta, rng))
    assert abs(g2 - 2.0) < 3 * se


# --- plans ---------------------------------------------------------------------------

def test_entry_invariants():
    with pytest.raises(PlanError):
        PlanEntry(0, 1, 0, 1.0)
    with pytest.raises(PlanError):
        PlanEntry(0, 1, 1, -1.0)
    with pytest.raises(PlanError):
        PlanEntry(2, 2, 1, 1.0, TMSV)
    with pytest.raises(PlanError):
        PlanEntry(1, 2, 1, 1.0, SMSV)


def test_plan_invariants(small_grid):
    with pytest.raises(PlanError):
        toy_plan(small_grid, [])
    with pytest.raises(PlanError):
        toy_plan(small_grid, [PlanEntry(0, 1, 1, 1.0), PlanEntry(0, 1, 2, 1.0)])
    with pytest.raises(PlanError):
        toy_plan(small_grid, [PlanEntry(1, 0, 1, 1.0)])
    with pytest.raises(PlanError):
        toy_plan(small_grid, [PlanEntry(0, 5, 1, 1.0)])


def test_pair_overlap_against_numerical_integral(scan_grid):
    width = 1.25
    sigma = width / (2 * math.sqrt(2 * math.log(2)))
    D = pair_overlap(scan_grid, WP, width)
    a, b = frequency_edges(scan_grid)

    def rho(y, x):
        return math.exp(-0.5 * ((x + y - WP) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))

    d = scan_grid.index_of(709.4)
    for i, j in [(d, d), (d, d + 1), (d - 3, d + 3), (12, 83), (10, 90)]:
        exact, _ = dblquad(rho, a[i], b[i], a[j], b[j], epsabs=1e-14, epsrel=1e-10)
        assert D[i, j] == pytest.approx(exact, rel=1e-7, abs=1e-14)
    np.testing.assert_allclose(D, D.T, rtol=1e-12, atol=1e-15)
    assert np.all(D.sum(axis=1) <= (b - a) + 1e-9)


def _kernel(grid, width, N=10.0):
    return CorrelationKernel(grid, N, 1.0, WP, width)


def test_delta_narrow_pump_pairs_only_conjugates(scan_grid):
    k = _kernel(scan_grid, 1e-4)
    plan = build_pairing_plan(scan_grid, k, GainPoint(1.0, np.full(len(scan_grid), 10.0)), 4)
    a, b = frequency_edges(scan_grid)
    for e in plan.entries:
        if e.bin_j is None:
            continue
        # bin j must contain the conjugate of some frequency of bin i
        lo, hi = WP - b[e.bin_i], WP - a[e.bin_i]
        assert lo <= b[e.bin_j] + 1e-6 and hi >= a[e.bin_j] - 1e-6


def test_plan_stores_unordered_pairs_once(scan_grid):
    gp = gain_point(scan_grid, 6.5)
    plan = build_pairing_plan(scan_grid, _kernel(scan_grid, 1.25), gp, 8)
    keys = [(e.bin_i, e.bin_j) for e in plan.entries if e.kind == TMSV and e.bin_j is not None]
    assert len(keys) == len(set(keys))
    assert all(i < j for i, j in keys)
    assert {(j, i) for i, j in keys}.isdisjoint(keys)
    smsv = [e for e in plan.entries if e.kind == SMSV]
    assert smsv and all(e.bin_i == e.bin_j for e in smsv)
    d = scan_grid.index_of(709.4)
    assert plan.degenerate_bin == d
    assert max(smsv, key=lambda e: e.multiplicity).bin_i == d
    # N is the geometric mean of the two bins
    e = next(e for e in plan.entries if e.kind == TMSV and e.bin_j is not None)
    assert e.n_per_mode == pytest.approx(math.sqrt(gp.n_per_mode[e.bin_i] * gp.n_per_mode[e.bin_j]))


def _pair_count(plan, b):
    return sum(e.pair_count for e in plan.entries if b in (e.bin_i, e.bin_j))


def _envelope_pairs(grid, width, b):
    # numerically integrated pair mass of bin b, a pair inside one bin counted once
    sigma = width / (2 * math.sqrt(2 * math.log(2)))
    lo, hi = frequency_edges(grid)

    def rho(y, x):
        return math.exp(-0.5 * ((x + y - WP) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))

    total, _ = dblquad(rho, lo[b], hi[b], lambda x: WP - x - 8 * sigma, lambda x: WP - x + 8 * sigma)
    own, _ = dblquad(rho, lo[b], hi[b], lo[b], hi[b])
    return total - own / 2


@pytest.mark.parametrize("width", [1.25, 0.05])
def test_degenerate_bin_pair_count_ratio(scan_grid, width):
    M = 2000
    gp = GainPoint(6.5, np.full(len(scan_grid), 10.0))
    plan = build_pairing_plan(scan_grid, _kernel(scan_grid, width), gp, M)
    d, g = scan_grid.index_of(709.4), scan_grid.index_of(704.0)
    ratio = _pair_count(plan, d) / _pair_count(plan, g)
    oracle = _envelope_pairs(scan_grid, width, d) / _envelope_pairs(scan_grid, width, g)
    assert ratio == pytest.approx(oracle, abs=5e-3)
    if width < 0.1:
        # pump narrower than a bin: the degenerate bin pairs with itself
        assert ratio == pytest.approx(0.5, abs=0.02)


def test_plan_errors(scan_grid):
    gp = gain_point(scan_grid, 6.5)
    k = _kernel(scan_grid, 1.25)
    with pytest.raises(PlanError):
        build_pairing_plan(scan_grid, k, gp, 0)
    with pytest.raises(PlanError):
        build_pairing_plan(scan_grid, k, gp, 4, floor=10.0)
    other = SpectralGrid.from_range(700.0, 710.0, 0.2)
    with pytest.raises(PlanError):
        build_pairing_plan(other, k, gp, 4)


def test_plan_digest_ignores_entry_order(small_grid):
    e = [PlanEntry(0, 1, 3, 2.0), PlanEntry(2, 2, 2, 1.0, SMSV), PlanEntry(1, None, 1, 4.0)]
    assert toy_plan(small_grid, e).digest == toy_plan(small_grid, e[::-1]).digest
    changed = [PlanEntry(0, 1, 3, 2.5)] + e[1:]
    assert toy_plan(small_grid, changed).digest != toy_plan(small_grid, e).digest


# --- simulation ----------------------------------------------------------------------

def test_lossless_conjugate_pairs_have_zero_difference(small_grid):
    plan = toy_plan(small_grid, [PlanEntry(0, 1, 5, 3.0)])
    fs = simulate_frames(plan, 50, 200, 1.0, 11)
    assert np.array_equal(fs.frames[:, 0], fs.frames[:, 1])
    assert fs.frames[:, 0].var() > 0 and not fs.frames[:, 2].any()


def test_unobserved_partner_feeds_one_bin(small_grid):
    plan = toy_plan(small_grid, [PlanEntry(1, None, 4, 2.0)])
    fs = simulate_frames(plan, 10, 50, 1.0, 5)
    assert not fs.frames[:, [0, 2]].any() and fs.frames[:, 1].sum() > 0


def test_nrf_at_half_efficiency(small_grid):
    N, K, F = 10.0, 4, 4000
    plan = toy_plan(small_grid, [PlanEntry(0, 1, K, N)])
    fs = simulate_frames(plan, 25, F, 0.5, 3)
    d = fs.frames[:, 0] - fs.frames[:, 1]
    mean = fs.frames[:, :2].mean()
    nrf = d.var(ddof=1) / (2 * mean)
    # the difference is a sum of many independent terms; Var of a sample variance ~ 2 s^4 / F
    se = math.sqrt(2.0 / (F - 1)) * 0.5 + 0.01
    assert abs(nrf - 0.5) < 3 * se


def test_empirical_scan_matches_closed_form_statistics(small_grid):
    # bins 0,1: conjugate TMSV pair; bin 2: degenerate SMSV
    N, K, pulses, eta, F = 3.0, 6, 20, 0.4, 6000
    plan = toy_plan(small_grid, [PlanEntry(0, 1, K, N), PlanEntry(2, 2, K, N, SMSV)])
    fs = simulate_frames(plan, pulses, F, eta, 21)
    from bsvsim.estimation import empirical_variance_scan
    emp = empirical_variance_scan(fs, 0)
    modes = K * pulses
    mean = eta * modes * N
    paired = variance_difference(mean, mean, 2.0, 2.0, 2.0 + 1.0 / N, m=modes)
    against_smsv = variance_difference(mean, mean, 2.0, 3.0 + 1.0 / N, 1.0, m=modes)
    for j, truth in ((1, paired), (2, against_smsv)):
        assert abs(emp.var_diff[j] - truth) < 3 * emp.var_se[j]


def test_determinism_and_worker_independence(scan_grid):
    gp = gain_point(scan_grid, 6.5)
    plan = build_pairing_plan(scan_grid, _kernel(scan_grid, 1.25), gp, 4)
    a = simulate_frames(plan, 30, 60, 0.2, 2**64 - 1)
    b = simulate_frames(plan, 30, 60, 0.2, 2**64 - 1, workers=3)
    c = simulate_frames(plan, 30, 60, 0.2, 12345)
    assert np.array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, c.frames)
    assert a.plan_digest == plan.digest


def test_permuted_entries_give_identical_counts(small_grid):
    e = [PlanEntry(0, 1, 3, 2.0), PlanEntry(2, 2, 2, 1.0, SMSV), PlanEntry(1, None, 1, 4.0)]
    x = simulate_frames(toy_plan(small_grid, e), 5, 40, 0.5, 8)
    y = simulate_frames(toy_plan(small_grid, [e[1], e[2], e[0]]), 5, 40, 0.5, 8)
    assert np.array_equal(x.frames, y.frames)


def test_per_mode_loop_matches_aggregate_statistics(small_grid):
    N, K, pulses, eta, F = 2.0, 3, 4, 0.6, 3000
    plan = toy_plan(small_grid, [PlanEntry(0, 1, K, N), PlanEntry(2, 2, K, N, SMSV)])
    truth = analytic_from_plan(plan, eta, pulses)
    for method in ("per_mode", "aggregate"):
        fs = simulate_frames(plan, pulses, F, eta, 17, method=method)
        means = fs.frames.mean(axis=0)
        se = np.sqrt(np.diag(truth.covariance) / F)
        assert np.all(np.abs(means - truth.means) < 3.5 * se)
        var = fs.frames.var(axis=0, ddof=1)
        assert np.all(np.abs(var / np.diag(truth.covariance) - 1) < 0.15)


def test_simulation_argument_checks(small_grid):
    plan = toy_plan(small_grid, [PlanEntry(0, 1, 1, 1.0)])
    for kwargs in ({"eta": 0.0}, {"eta": 1.2}, {"seed": -1}, {"seed": 2**64}, {"method": "fast"}):
        args = {"pulses_per_frame": 1, "frames": 2, "eta": 0.5, "seed": 0, **kwargs}
        with pytest.raises(ValueError):
            simulate_frames(plan, **args)
    with pytest.raises(ValueError):
        simulate_frames(plan, 0, 2, 0.5, 0)


def test_accumulator_overflow_is_an_error(small_grid, monkeypatch):
    plan = toy_plan(small_grid, [PlanEntry(0, 1, 100, 1e6)])
    monkeypatch.setattr(fr, "_COUNT_LIMIT", 1000)
    with pytest.raises(OverflowError):
        simulate_frames(plan, 10, 2, 1.0, 0)


# --- persistence ---------------------------------------------------------------------

def test_frameset_round_trip(tmp_path, small_grid):
    plan = toy_plan(small_grid, [PlanEntry(0, 1, 3, 2.0), PlanEntry(2, 2, 2, 1.0, SMSV)])
    fs = simulate_frames(plan, 5, 7, 0.5, 2**63 + 5)
    path = tmp_path / "f.bin"
    fs.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"BSVF" and len(raw) == fr._HEADER.size + 4 * 7 * 3
    back = FrameSet.load(path)
    assert np.array_equal(back.frames, fs.frames)
    assert (back.seed, back.pulses_per_frame, back.plan_digest) == (fs.seed, 5, plan.digest)
    fs.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "frame,700.0000,700.5000,701.0000" and len(lines) == 8


def test_frameset_checks(tmp_path):
    digest = bytes(32)
    with pytest.raises(ValueError):
        FrameSet(np.zeros((0, 3), np.int64), 1, 0, digest)
    with pytest.raises(ValueError):
        FrameSet(-np.ones((2, 3), np.int64), 1, 0, digest)
    big = FrameSet(np.full((1, 3), 2**32, np.int64), 1, 0, digest)
    with pytest.raises(OverflowError):
        big.save(tmp_path / "big.bin")
    (tmp_path / "junk.bin").write_bytes(b"XXXX" + bytes(80))
    with pytest.raises(ValueError, match="not a frame file"):
        FrameSet.load(tmp_path / "junk.bin")


# --- closed-form moments -------------------------------------------------------------

def test_analytic_single_tmsv_against_brute_force(small_grid):
    N = 2.5
    n = np.arange(10_001)
    p = (N / (1 + N)) ** n / (1 + N)
    var = np.sum(p * n**2) - np.sum(p * n) ** 2
    m = analytic_from_plan(toy_plan(small_grid, [PlanEntry(0, 1, 1, N)]), 1.0)
    assert m.covariance[0, 1] == pytest.approx(var, rel=1e-12)
    assert m.covariance[0, 1] == pytest.approx(N**2 + N, rel=1e-12)
    var_diff, _ = m.variance_scan(0)
    assert var_diff[1] == pytest.approx(0.0, abs=1e-12)
    assert m.covariance[0, 2] == 0 and m.covariance[1, 2] == 0


def test_analytic_single_smsv_against_pmf(small_grid):
    N = 1.7
    p = smsv_pmf(N, 4000)
    n = np.arange(p.size)
    var = np.sum(p * n**2) - np.sum(p * n) ** 2
    m = analytic_from_plan(toy_plan(small_grid, [PlanEntry(2, 2, 1, N, SMSV)]), 1.0)
    assert m.covariance[2, 2] == pytest.approx(var, rel=1e-10)
    assert m.means[2] == pytest.approx(np.sum(p * n), rel=1e-10)
    # consistent with g2 = 3 + 1/N for one mode
    assert (var - N) / N**2 + 1 == pytest.approx(3 + 1 / N, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 50.0), st.floats(0.05, 1.0), st.integers(1, 20))
def test_analytic_loss_algebra(N, eta, K):
    grid = SpectralGrid.from_range(700.0, 701.0, 0.5)
    m = analytic_from_plan(toy_plan(grid, [PlanEntry(0, 1, K, N)]), eta)
    var_diff, nrf = m.variance_scan(0)
    assert nrf[1] == pytest.approx(1 - eta, rel=1e-9, abs=1e-12)
    g2_minus_1 = (m.covariance[0, 1]) * K / m.means[0] ** 2
    assert g2_minus_1 == pytest.approx(1 + 1 / N, rel=1e-9)


def test_monte_carlo_agrees_with_plan_moments(scan_grid):
    gp = gain_point(scan_grid, 6.5)
    plan = build_pairing_plan(scan_grid, _kernel(scan_grid, 1.25), gp, 4)
    F, pulses, eta = 3000, 20, 0.2
    fs = simulate_frames(plan, pulses, F, eta, 77)
    truth = analytic_from_plan(plan, eta, pulses)
    X = fs.frames
    z_mean = np.abs(X.mean(0) - truth.means) / np.sqrt(np.diag(truth.covariance) / F)
    assert np.mean(z_mean < 3) >= 0.99
    from bsvsim.estimation import empirical_covariance_map
    est = empirical_covariance_map(fs)
    z = np.abs(est.covariance - truth.covariance) / est.standard_error
    assert np.mean(z[np.triu_indices(len(scan_grid))] < 3) >= 0.99
