"""The thirteen acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line through ``record_criterion``; the
lines are collected again in the terminal summary. Run with
``pytest tests/test_acceptance.py -v -s`` to see them inline.
"""

import math
import time

import numpy as np
import pytest

from conftest import record_criterion
from snls.coupling import (
    CouplingConfig,
    _block_indices,
    check_ell_structure,
    couple_ensemble,
    ell_all,
    fit_slope_constant,
    pathwise_certificate,
)
from snls.estimators import (
    EnsembleConfig,
    dispersive_decay_check,
    gamma_paths,
    irreducibility_probe,
    mixing_rate,
    moment_check_h,
    plateau_scaling,
    reference_fields,
    run_ensemble,
    sample_initial_pairs,
)
from snls.integrator import StepConfig, evolve
from snls.model import ModelParams, random_smooth_fields
from snls.noise import CovarianceSpec
from snls.oracles import (
    elementary_ineq_constant,
    power_difference_bruteforce,
    linear_exact_solution,
    ou_stationary_variance,
)
from snls.spectral import Field, forward, make_grid

Q_DEFAULT = CovarianceSpec(1.0, 4.0)
LAM_LARGE = 20.0


@pytest.fixture(scope="module")
def grid128():
    return make_grid(1, 128, 20.0)


@pytest.fixture(scope="module")
def pair_data(grid128):
    rng = np.random.default_rng(0)
    return random_smooth_fields(grid128, 100, rng), random_smooth_fields(grid128, 100, rng)


@pytest.fixture(scope="module")
def c_hat():
    return elementary_ineq_constant(1.0, 10**6, np.random.default_rng(3)).max_ratio


@pytest.fixture(scope="module")
def large_damping(pair_data, c_hat):
    """100 synchronously coupled pairs at lam = 20, dt = 1e-3, horizon 2."""
    a, b = pair_data
    params = ModelParams(LAM_LARGE, -1, 1.0, 1)
    t0 = time.perf_counter()
    recs = couple_ensemble(a, b, params, Q_DEFAULT, 2.0, StepConfig(1e-3), seed=7,
                           coupling_cfg=CouplingConfig(1.0, 1.0, 0.25), track_gamma=True)
    return params, recs, time.perf_counter() - t0


class TestAcceptance:

    def test_01_linear_exactness(self, grid128):
        u0 = Field.from_function(grid128, lambda x: np.exp(-(x - 10) ** 2) * (1 + 0.3j)
                                 + 0.2 * np.exp(2j * np.pi * x / 20))
        params = ModelParams(1.0, -1, 0.0, 1)
        t0 = time.perf_counter()
        _, vals, _ = evolve(u0.values, grid128, params, CovarianceSpec.zero(), 1000,
                            StepConfig(1e-2, diagnostics_stride=1000), 0, [0])
        elapsed = time.perf_counter() - t0
        exact = linear_exact_solution(u0, 1.0, 10.0, alpha=params.alpha).values
        err = float(np.max(np.abs(forward(vals, grid128) - exact)))
        ok = err <= 1e-12 and elapsed < 1.0
        assert record_criterion(1, ok, f"max per-mode error {err:.2e} (<= 1e-12), {elapsed:.2f} s")

    def test_02_conservation(self, grid128):
        u0 = Field.from_function(grid128, lambda x: np.exp(-(x - 10) ** 2) * (1 + 0.3j))
        drifts, t0 = {}, time.perf_counter()
        for alpha in (1, -1):
            params = ModelParams(0.0, alpha, 1.0, 1, kappa=1.0 if alpha == 1 else None)
            rec, _, _ = evolve(u0.values, grid128, params, CovarianceSpec.zero(), 1000,
                               StepConfig(1e-2, diagnostics_stride=1000), 0, [0])
            drifts[alpha] = abs(math.sqrt(rec.mass[-1] / rec.mass[0]) - 1)
        elapsed = time.perf_counter() - t0
        ok = max(drifts.values()) <= 1e-10 and elapsed < 5
        assert record_criterion(2, ok, f"relative norm drift focusing {drifts[1]:.1e}, "
                                       f"defocusing {drifts[-1]:.1e} (<= 1e-10), {elapsed:.2f} s")

    def test_03_splitting_order(self):
        grid = make_grid(1, 256, 20.0)
        u0 = Field.from_function(grid, lambda x: 1.2 * np.exp(-(x - 10) ** 2 / 2)
                                 * np.exp(1j * 2 * np.pi * 2 * x / 20))
        ratios, t0 = [], time.perf_counter()
        for alpha in (1, -1):
            params = ModelParams(0.0, alpha, 1.0, 1, kappa=1.0 if alpha == 1 else None)
            drift = []
            for dt in (4e-3, 2e-3, 1e-3):
                n = round(1 / dt)
                rec, _, _ = evolve(u0.values, grid, params, CovarianceSpec.zero(), n,
                                   StepConfig(dt, diagnostics_stride=n), 0, [0])
                drift.append(abs(rec.phi[-1] - rec.phi[0]))
            ratios += [drift[0] / drift[1], drift[1] / drift[2]]
        elapsed = time.perf_counter() - t0
        ok = all(3.2 <= r <= 4.8 for r in ratios) and elapsed < 30
        assert record_criterion(3, ok, "drift ratios " + ", ".join(f"{r:.3f}" for r in ratios)
                                + f" (4 +- 20%), {elapsed:.1f} s")

    def test_04_ou_closed_form(self):
        grid = make_grid(1, 4, 2 * np.pi)
        Q = CovarianceSpec(1.0, 1.0, mode_cutoff=0.0)
        t0 = time.perf_counter()
        _, gam = gamma_paths(Q, grid, 1.0, 10.0, 0.1, seed=1, ids=np.arange(10**4), stride=100)
        elapsed = time.perf_counter() - t0
        x = np.abs(gam[:, -1, 0]) ** 2
        se = x.std(ddof=1) / math.sqrt(x.size)
        target = ou_stationary_variance(Q.coefficients(grid).ravel()[0], 1.0)
        z = abs(x.mean() - target) / se
        ok = z <= 3 and elapsed < 30
        assert record_criterion(4, ok, f"E|Gamma_0|^2 = {x.mean():.4f} vs {target:.4f}, "
                                       f"{z:.2f} SE (<= 3), {elapsed:.1f} s")

    def test_05_linear_coupling_exact(self, grid128, pair_data):
        a, b = pair_data
        params = ModelParams(0.5, -1, 0.0, 1)
        t0 = time.perf_counter()
        recs = couple_ensemble(a, b, params, Q_DEFAULT, 2.0, StepConfig(1e-2, diagnostics_stride=1),
                               seed=7, ids=np.arange(100), track_gamma=False)
        elapsed = time.perf_counter() - t0
        err = max(float(np.max(np.abs(r.w_norm_series / (np.exp(-0.5 * r.times) * r.w_norm_series[0]) - 1)))
                  for r in recs)
        ok = len(recs) == 100 and err <= 1e-12 and elapsed < 30
        assert record_criterion(5, ok, f"{len(recs)} paths, max relative error {err:.1e} (<= 1e-12), "
                                       f"{elapsed:.1f} s")

    def test_06_pathwise_certificate(self, pair_data, large_damping, c_hat):
        params, recs, _ = large_damping
        frac_dt = float(np.mean([pathwise_certificate(r, params, c_hat).violation_fraction for r in recs]))
        a, b = pair_data
        t0 = time.perf_counter()
        fine = couple_ensemble(a[:20], b[:20], params, Q_DEFAULT, 2.0, StepConfig(2.5e-4), seed=7,
                               track_gamma=False)
        elapsed = time.perf_counter() - t0
        frac_fine = float(np.mean([pathwise_certificate(r, params, c_hat).violation_fraction for r in fine]))
        ok = frac_dt <= 0.01 and frac_fine <= frac_dt and elapsed < 120
        assert record_criterion(6, ok, f"C_hat = {c_hat:.4f}; violation fraction {frac_dt:.2e} at dt=1e-3, "
                                       f"{frac_fine:.2e} at dt/4 (20 paths, {elapsed:.1f} s)")

    def test_07_large_damping_contraction(self, large_damping, c_hat):
        params, recs, elapsed = large_damping
        below = sum(r.w_norm_series[-1] < 1e-8 for r in recs)
        worst = -math.inf
        for r in recs:
            scale = np.sqrt(r.mass_1) + np.sqrt(r.mass_2)
            keep = r.w_norm_series > 1e-11 * scale
            slope = 2 * np.polyfit(r.times[keep], np.log(r.w_norm_series[keep]), 1)[0]
            bound = -2 * params.lam + c_hat * np.mean((r.sup_1**2 + r.sup_2**2)[keep])
            worst = max(worst, slope - (bound + 0.1 * abs(bound)))
        ok = below >= 95 and worst <= 0 and elapsed < 180
        assert record_criterion(7, ok, f"{below}/100 pairs below 1e-8 at t=2 (>= 95); worst slope excess "
                                       f"over bound+10% {worst:.2f} (<= 0), {elapsed:.1f} s")

    def test_08_coupling_event_structure(self, large_damping):
        _, recs, _ = large_damping
        cfg = CouplingConfig(1.0, 1.0, 0.25)
        k_fit = fit_slope_constant([e for r in recs for e in (r.en_series_1, r.en_series_2)], recs[0].times)
        violations, coupled, checked = [], 0, 0
        for k in (k_fit, 0.1 * k_fit):
            c = cfg.with_slope(k)
            for r in recs:
                ell = ell_all(r, c)
                bidx = _block_indices(r.times, c.block_length)
                violations += check_ell_structure(ell, r.phi_pair_series[bidx], c.beta)
                coupled += int(np.isfinite(ell[-1]))
                checked += 1
        ok = not violations
        assert record_criterion(8, ok, f"{checked} records checked (K = {k_fit:.3g} and K/10), "
                                       f"{coupled} coupled by the last block, {len(violations)} violations")

    def test_09_moment_plateau_scaling(self):
        grid = make_grid(1, 128, 20.0)
        reports, t0 = [], time.perf_counter()
        for lam in (2.0, 4.0):
            rec = run_ensemble(Field.zeros(grid), ModelParams(lam, -1, 1.0, 1), Q_DEFAULT,
                               EnsembleConfig(1000, 11, 20.0), StepConfig(1e-2, diagnostics_stride=10))
            reports.append(moment_check_h(rec, 1, Q_DEFAULT))
        elapsed = time.perf_counter() - t0
        ratio = plateau_scaling(*reports)["ratio"]
        ok = 1.6 <= ratio <= 2.4 and elapsed < 300
        assert record_criterion(9, ok, f"plateau ratio lam 2 -> 4: {ratio:.3f} (in [1.6, 2.4]), {elapsed:.1f} s")

    def test_10_dispersive_exponent(self):
        out, ok = [], True
        for dim, n, limit, tol in ((1, 2048, 120, 0.05), (2, 512, 600, 0.1)):
            t0 = time.perf_counter()
            grid = make_grid(dim, n, 200.0)
            u0 = Field.from_function(grid, lambda *xs: np.exp(-sum((x - 100) ** 2 for x in xs) / 2))
            rep = dispersive_decay_check(u0, np.linspace(0.5, 20, 60))
            elapsed = time.perf_counter() - t0
            ok &= abs(rep.slope + dim / 2) <= tol and elapsed < limit
            out.append(f"d={dim} slope {rep.slope:.3f} ({-dim / 2} +- {tol}, window "
                       f"{rep.slope_window[0]:.1f}-{rep.slope_window[1]:.1f}, {elapsed:.1f} s)")
        assert record_criterion(10, ok, "; ".join(out))

    def test_11_inequality_oracles(self):
        rng = np.random.default_rng(11)
        parts, ok = [], True
        for name, fn in (("elementary", elementary_ineq_constant), ("power-difference", power_difference_bruteforce)):
            for sigma in (0.25, 0.5, 1.0, 1.5):
                rep = fn(sigma, 10**6, rng, margin=1e-4)
                ok &= math.isfinite(rep.max_ratio) and rep.stability_delta < 0.05 and rep.violations == 0
                parts.append(f"{name}[{sigma}]={rep.max_ratio:.4f}/{rep.stability_delta:.1e}/{rep.violations}")
        assert record_criterion(11, ok, "constant/doubling change/violations " + " ".join(parts))

    def test_12_mixing_trend(self, grid128):
        _, phi = reference_fields(grid128)
        u1, u2 = Field.zeros(grid128), Field(grid128, 0.9 * phi)
        t0 = time.perf_counter()
        fits = mixing_rate(u1, u2, ModelParams(LAM_LARGE, -1, 1.0, 1), Q_DEFAULT,
                           EnsembleConfig(500, 5, 3.0), StepConfig(2e-3, diagnostics_stride=1), burn_in=0.01)
        elapsed = time.perf_counter() - t0
        ok = len(fits) == 3 and elapsed < 600
        parts = []
        for name, f in fits.items():
            ok &= f.trend_pvalue < 0.01 and f.hits_floor and f.floor_time <= 3.0
            parts.append(f"{name}: p={f.trend_pvalue:.1e}, floor at t={f.floor_time}")
        assert record_criterion(12, ok, "; ".join(parts) + f" ({elapsed:.1f} s)")

    def test_13_irreducibility(self, grid128):
        params = ModelParams(2.0, -1, 1.0, 1)
        a, b = sample_initial_pairs(grid128, params, 10.0, 500, np.random.default_rng(4))
        t0 = time.perf_counter()
        rep = irreducibility_probe(10.0, 0.5, 10.0, a, b, params, CovarianceSpec(0.5, 4.0),
                                   StepConfig(1e-2, diagnostics_stride=10), seed=3)
        elapsed = time.perf_counter() - t0
        prop = rep.at(10.0)
        ok = prop.ci_low > 0 and elapsed < 600
        assert record_criterion(13, ok, f"P(pair functional <= 0.5 at t=10) = {prop.estimate:.3f}, "
                                        f"Wilson 95% [{prop.ci_low:.3f}, {prop.ci_high:.3f}] excludes 0, "
                                        f"{elapsed:.1f} s")
