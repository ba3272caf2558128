"""Tests for the Monte-Carlo estimators and the analytic exponent checks."""

import math

import numpy as np
import pytest

from snls.estimators import (
    EnsembleConfig,
    Observable,
    admissible_pair_check,
    dispersive_decay_check,
    fit_rate,
    gamma_moment_check,
    irreducibility_probe,
    lipschitz_spot_check,
    mixing_rate,
    moment_check_h,
    moment_check_phi,
    nonlinearity_bound_check,
    nonlinearity_ratios,
    nonlinearity_window,
    plateau_scaling,
    reference_fields,
    run_ensemble,
    sample_initial_pairs,
    shipped_observables,
    strichartz_integral,
    variance_reduction,
    wraparound_time,
)
from snls.integrator import StepConfig
from snls.model import ModelParams, phi_alpha, random_smooth_fields
from snls.noise import CovarianceSpec, hs_norm
from snls.spectral import Field, make_grid

Q = CovarianceSpec(1.0, 4.0)


@pytest.fixture
def grid():
    return make_grid(1, 64, 20.0)


@pytest.fixture(scope="module")
def lam_pair():
    """Ensembles from u0 = 0 at lam = 2 and lam = 4 (M = 1000, horizon 5, Gamma tracked)."""
    g = make_grid(1, 64, 20.0)
    out = []
    for lam in (2.0, 4.0):
        p = ModelParams(lam, -1, 1.0, 1)
        out.append(run_ensemble(Field.zeros(g), p, Q, EnsembleConfig(1000, 3, 5.0),
                                StepConfig(1e-2, diagnostics_stride=10), track_gamma=True))
    return out


class TestMoments:
    """Moment bounds for the mass and the functional."""

    def test_noiseless_pure_decay(self, grid, rng):
        u0 = random_smooth_fields(grid, 20, rng)
        p = ModelParams(1.0, -1, 1.0, 1)
        rec = run_ensemble(u0, p, CovarianceSpec.zero(), EnsembleConfig(20, 0, 2.0),
                           StepConfig(1e-2, diagnostics_stride=10))
        rep = moment_check_h(rec, 1, CovarianceSpec.zero())
        assert rep.fitted_constant == 0.0
        assert np.all(rep.curve <= rep.decay_term * (1 + 1e-10))
        phi = moment_check_phi(rec, 1, CovarianceSpec.zero())
        assert np.all(np.diff(phi.curve) < 0)

    def test_zero_start_plateau_only(self, lam_pair):
        rep = moment_check_h(lam_pair[0], 1, Q)
        assert np.all(rep.decay_term == 0)
        assert math.isfinite(rep.fitted_constant) and rep.fitted_constant > 0
        assert rep.excluded == 0 and not rep.failed

    def test_plateau_matches_closed_form(self, lam_pair):
        """From u0 = 0 the mass plateau sits near sum q_k^2 / (2 lam)."""
        g = lam_pair[0].final_state.grid
        rep = moment_check_h(lam_pair[0], 1, Q)
        exact = hs_norm(Q, 0, g) ** 2 / (2 * 2.0)
        assert rep.plateau == pytest.approx(exact, rel=0.1)

    def test_lambda_doubling_mass(self, lam_pair):
        a, b = (moment_check_h(r, 1, Q) for r in lam_pair)
        assert 1.6 <= plateau_scaling(a, b)["ratio"] <= 2.4

    def test_lambda_doubling_functional(self, lam_pair):
        """The dominant power of 1/lam is identified within 0.3."""
        a, b = (moment_check_phi(r, 1, Q) for r in lam_pair)
        sc = plateau_scaling(a, b, a.extras["lambda_powers"])
        assert abs(sc["exponent_error"]) <= 0.3
        assert a.as_dict()["lambda_powers"] == [1.0, 2.0]

    def test_bad_index(self, lam_pair):
        with pytest.raises(ValueError):
            moment_check_h(lam_pair[0], 4, Q)


class TestGammaMoments:
    """Moments of the stochastic convolution."""

    def test_zero_noise(self, grid):
        rec = run_ensemble(Field.zeros(grid), ModelParams(1.0, -1, 1.0, 1), CovarianceSpec.zero(),
                           EnsembleConfig(4, 0, 1.0), StepConfig(0.1), track_gamma=True)
        rep = gamma_moment_check(rec, 1, CovarianceSpec.zero())
        assert rep.fitted_c == 0.0 and np.all(rep.mean_integral == 0)

    def test_single_mode_closed_form(self):
        """One mode with q = 1: E int |Gamma|^2 matches the Ito closed form within 3 SE."""
        g = make_grid(1, 4, 2 * np.pi)
        Qm = CovarianceSpec(1.0, 1.0, mode_cutoff=0.0)
        lam, T = 1.0, 4.0
        rec = run_ensemble(Field.zeros(g), ModelParams(lam, -1, 0.0, 1), Qm, EnsembleConfig(4000, 6, T),
                           StepConfig(0.02), track_gamma=True)
        rep = gamma_moment_check(rec, 1, Qm)
        # int_0^T (1 - e^{-2 lam s}) / (2 lam) ds
        exact = (T - (1 - math.exp(-2 * lam * T)) / (2 * lam)) / (2 * lam)
        from scipy.integrate import cumulative_trapezoid
        per_path = cumulative_trapezoid(rec.gamma_norm**2, rec.times, axis=-1)[:, -1]
        se = per_path.std(ddof=1) / math.sqrt(per_path.size)
        assert abs(rep.mean_integral[-1] - exact) < 3 * se + 1e-3 * exact

    def test_lambda_doubling_fourth_moment(self, lam_pair):
        a, b = (gamma_moment_check(r, 2, Q) for r in lam_pair)
        assert a.mean_integral[-1] / b.mean_integral[-1] == pytest.approx(4.0, rel=0.3)

    def test_constant_reported(self, lam_pair):
        rep = gamma_moment_check(lam_pair[0], 1, Q)
        assert 0 < rep.fitted_c < 1 and rep.stability < 0.2
        assert set(rep.as_dict()) >= {"fitted_c", "stability", "reference"}

    def test_requires_gamma(self, grid):
        rec = run_ensemble(Field.zeros(grid), ModelParams(1.0, -1, 1.0, 1), Q,
                           EnsembleConfig(2, 0, 0.1), StepConfig(0.1))
        with pytest.raises(ValueError):
            gamma_moment_check(rec, 1, Q)


class TestObservables:
    """Shipped observables and the Lipschitz probe."""

    def test_lipschitz(self, grid, rng):
        for f in shipped_observables(grid).values():
            assert lipschitz_spot_check(f, grid, rng) <= 1 + 1e-9

    def test_non_lipschitz_rejected(self, grid, rng):
        bad = Observable("mass", lambda v, g: 5 * np.sum(np.abs(v) ** 2, axis=-1) * g.cell_volume)
        with pytest.raises(ValueError):
            lipschitz_spot_check(bad, grid, rng)

    def test_values(self, grid):
        obs = shipped_observables(grid)
        g, phi = reference_fields(grid)
        zero = Field.zeros(grid)
        assert obs["f1"](zero)[()] == 0.0
        assert obs["f3"](Field(grid, 0.3 * phi))[()] == pytest.approx(0.3)
        assert obs["f3"](Field(grid, 3 * phi))[()] == 0.5
        assert obs["f2"](Field(grid, g))[()] == pytest.approx(0.0, abs=1e-15)


class TestMixing:
    """Gap curves under common noise."""

    def test_identical_starts(self, grid, rng):
        u = random_smooth_fields(grid, 1, rng)[0]
        fits = mixing_rate(u, u, ModelParams(2.0, -1, 1.0, 1), Q, EnsembleConfig(40, 1, 0.5),
                           StepConfig(1e-2, diagnostics_stride=5))
        for f in fits.values():
            assert np.all(f.gap == 0)

    def test_linear_exponential_rate(self, grid):
        """sigma = 0, Q = 0, f = d1(u, 0): the gap decays at rate lam."""
        _, phi = reference_fields(grid)
        lam = 1.3
        fits = mixing_rate(Field.zeros(grid), Field(grid, 0.9 * phi), ModelParams(lam, -1, 0.0, 1),
                           CovarianceSpec.zero(), EnsembleConfig(1, 0, 4.0, ("f1",)),
                           StepConfig(1e-2, diagnostics_stride=10))
        f = fits["f1"]
        assert f.exp_rate == pytest.approx(lam, rel=0.05)
        np.testing.assert_allclose(f.gap, 0.9 * np.exp(-lam * f.times), rtol=1e-10)

    def test_fit_rate_window_and_trend(self):
        t = np.linspace(0, 5, 51)
        gap = np.exp(-2 * t)
        floor = np.full(51, 1e-3)
        fit = fit_rate("x", t, gap, floor, burn_in=0.1)
        assert fit.exp_rate == pytest.approx(2.0, rel=1e-10)
        assert fit.fit_window[0] == pytest.approx(0.1)
        assert fit.fit_window[1] < -math.log(3e-3) / 2
        assert fit.trend_pvalue < 1e-6 and fit.hits_floor
        assert fit.as_dict()["observable"] == "x"

    def test_common_noise_reduces_variance(self, grid):
        _, phi = reference_fields(grid)
        vr = variance_reduction(Field.zeros(grid), Field(grid, 0.5 * phi), ModelParams(5.0, -1, 1.0, 1), Q,
                                EnsembleConfig(60, 2, 0.5), StepConfig(1e-2, diagnostics_stride=5))
        for k, v in vr.items():
            assert v["common"] < v["independent"], k


class TestIrreducibility:
    """Probability of entering a small functional ball."""

    def test_noiseless_enters_ball(self, grid):
        p = ModelParams(2.0, -1, 1.0, 1)
        a, b = sample_initial_pairs(grid, p, 10.0, 40, np.random.default_rng(0))
        rep = irreducibility_probe(10.0, 0.5, 3.0, a, b, p, CovarianceSpec.zero(),
                                   StepConfig(1e-2, diagnostics_stride=10), seed=0, test_times=[0.0])
        assert rep.at(3.0).estimate == 1.0
        assert rep.at(0.0).estimate < 1.0
        assert rep.first_positive_time is not None

    def test_huge_radius(self, grid):
        p = ModelParams(2.0, -1, 1.0, 1)
        a, b = sample_initial_pairs(grid, p, 10.0, 40, np.random.default_rng(0))
        rep = irreducibility_probe(10.0, 1e9, 1.0, a, b, p, Q, StepConfig(1e-2), seed=0)
        assert rep.at(1.0).estimate == 1.0

    def test_initial_pairs_respect_radius(self, grid):
        p = ModelParams(2.0, -1, 1.0, 1)
        a, b = sample_initial_pairs(grid, p, 4.0, 30, np.random.default_rng(1))
        total = phi_alpha(a, p).phi + phi_alpha(b, p).phi
        assert np.all(total <= 4.0 * (1 + 1e-12))

    def test_rejects_pairs_outside_radius(self, grid):
        p = ModelParams(2.0, -1, 1.0, 1)
        big = Field(grid, np.full(grid.shape, 3.0 + 0j))
        with pytest.raises(ValueError):
            irreducibility_probe(1.0, 0.5, 1.0, big, big, p, Q, StepConfig(1e-2), seed=0)


class TestStrichartz:
    """Time-integrated sup norm against the functional bound."""

    def test_zero_path(self, grid):
        rec = run_ensemble(Field.zeros(grid), ModelParams(1.0, -1, 1.0, 1), CovarianceSpec.zero(),
                           EnsembleConfig(1, 0, 1.0), StepConfig(0.1), track_gamma=True)
        rep = strichartz_integral(rec, c_sigma=1.0)
        assert np.all(rep.lhs == 0)
        np.testing.assert_allclose(rep.rhs_unit[0], 1.0 + rep.times)
        assert rep.violation_fraction == 0.0

    def test_one_dimensional_constant_finite(self, grid, rng):
        rec = run_ensemble(random_smooth_fields(grid, 20, rng), ModelParams(1.0, -1, 1.0, 1), Q,
                           EnsembleConfig(20, 1, 2.0), StepConfig(1e-2, diagnostics_stride=5),
                           track_gamma=True)
        rep = strichartz_integral(rec)
        assert 0 < rep.fitted_c < math.inf
        assert rep.n_sigma == 1
        assert strichartz_integral(rec, c_sigma=rep.fitted_c).violation_fraction == 0.0

    def test_two_dimensional_constant_stable_across_seeds(self):
        """Fixed initial ensemble, ten noise seeds: every fit within 20% of the median."""
        g = make_grid(2, 32, 10.0)
        p = ModelParams(1.0, -1, 1.0, 2)
        q = CovarianceSpec(0.3, 4.0)
        u0 = random_smooth_fields(g, 20, np.random.default_rng(100))
        cs = [strichartz_integral(run_ensemble(u0, p, q, EnsembleConfig(20, s, 1.0),
                                               StepConfig(1e-2, diagnostics_stride=2),
                                               track_gamma=True)).fitted_c for s in range(10)]
        med = np.median(cs)
        assert np.all(np.abs(np.asarray(cs) / med - 1) <= 0.2)

    def test_requires_gamma(self, grid):
        rec = run_ensemble(Field.zeros(grid), ModelParams(1.0, -1, 1.0, 1), Q,
                           EnsembleConfig(1, 0, 0.1), StepConfig(0.1))
        with pytest.raises(ValueError):
            strichartz_integral(rec)


class TestDispersive:
    """Free-flow decay and its whole-space bound."""

    def test_l2_case_is_unitary(self):
        g = make_grid(1, 256, 40.0)
        u = Field.from_function(g, lambda x: np.exp(-(x - 20) ** 2))
        rep = dispersive_decay_check(u, [1e-6, 0.1, 1.0], p=2)
        assert np.all(rep.ratio <= 1 + 1e-12)

    def test_wraparound_flagged(self):
        g = make_grid(1, 256, 40.0)
        u = Field.from_function(g, lambda x: np.exp(-(x - 20) ** 2))
        t_wrap, k_max = wraparound_time(u)
        rep = dispersive_decay_check(u, [0.5 * t_wrap, 2 * t_wrap])
        assert rep.flagged_times == [pytest.approx(2 * t_wrap)]
        assert list(rep.valid) == [True, False]
        assert k_max > 0

    def test_one_dimensional_slope(self):
        g = make_grid(1, 2048, 200.0)
        u = Field.from_function(g, lambda x: np.exp(-(x - 100) ** 2 / 2))
        rep = dispersive_decay_check(u, np.linspace(0.5, 20, 60))
        assert rep.slope == pytest.approx(-0.5, abs=0.05)
        assert rep.bound_holds

    def test_rejects_bad_arguments(self):
        g = make_grid(1, 64, 10.0)
        u = Field.from_function(g, lambda x: np.exp(-(x - 5) ** 2))
        with pytest.raises(ValueError):
            dispersive_decay_check(u, [1.0], p=1.5)
        with pytest.raises(ValueError):
            dispersive_decay_check(u, [0.0])


class TestExponents:
    """Admissible pairs and the nonlinear H^{1,p} bound."""

    @pytest.mark.parametrize("gamma,r,dim,expected", [
        (2, 6, 3, True), (2, math.inf, 1, False), (2, math.inf, 3, False),
        (math.inf, 2, 1, True), (4, math.inf, 1, True), (4, 4, 2, True), (3, 4, 2, False),
        (1, 2, 1, False),
    ])
    def test_admissible(self, gamma, r, dim, expected):
        ok, why = admissible_pair_check(gamma, r, dim)
        assert ok is expected, why

    def test_window(self):
        assert nonlinearity_window(1.0, 3, 1.2) is None
        assert "6/(2 sigma+3)" in nonlinearity_window(1.0, 3, 1.5)
        assert "2/(2 sigma+1)" in nonlinearity_window(0.25, 2, 1.2)
        assert nonlinearity_window(1.0, 1, 1.2) is not None

    def test_window_enforced(self):
        g = make_grid(3, 8, 10.0)
        with pytest.raises(ValueError, match="6/"):
            nonlinearity_bound_check(1.0, 3, 1.9, Field.zeros(g, (2,)))

    def test_zero_field_is_no_data(self):
        g = make_grid(3, 8, 10.0)
        rep = nonlinearity_bound_check(1.0, 3, 1.2, Field.zeros(g, (3,)))
        assert rep.max_ratio is None and rep.n_skipped == 3

    def test_amplitude_invariance(self):
        """A plane wave's ratio is the same at amplitudes 1 and 10."""
        g = make_grid(2, 16, 2 * np.pi)
        wave = np.exp(1j * (g.coordinates[0] + 2 * g.coordinates[1]))
        r = nonlinearity_ratios(1.0, 1.5, Field(g, np.stack([wave, 10 * wave])))
        assert r[1] == pytest.approx(r[0], rel=1e-8)

    def test_three_dimensional_constant_stable(self):
        g = make_grid(3, 16, 10.0)
        ens = random_smooth_fields(g, 200, np.random.default_rng(0))
        rep = nonlinearity_bound_check(1.0, 3, 6 / 5, ens)
        assert math.isfinite(rep.max_ratio) and rep.n_used == 200
        assert rep.stability < 0.2
