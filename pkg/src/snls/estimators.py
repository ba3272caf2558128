"""Monte-Carlo experiments: moment bounds, mixing, irreducibility and dispersive checks.

Every experiment returns a small report dataclass. Fitted constants always come
with the window they were fitted on; probabilities come with Wilson intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.stats import kendalltau

from .coupling import Proportion, wilson
from .integrator import StepConfig, TrajectoryRecord, evolve, step_count, tile
from .model import ModelParams, combine_phi, functional_parts, random_smooth_fields
from .noise import CovarianceSpec, hs_norm, ou_variance, propagator, unit_noise
from .spectral import Field, Grid, norm_hsp, norm_sobolev


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int
    seed: int
    horizon: float
    observables: tuple[str, ...] = ("f1", "f2", "f3")
    id_offset: int = 0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    @property
    def ids(self) -> np.ndarray:
        return self.id_offset + np.arange(self.n_paths)


def run_ensemble(u0: Field, params: ModelParams, Q: CovarianceSpec, ens: EnsembleConfig,
                 step: StepConfig, track_gamma: bool = False) -> TrajectoryRecord:
    """Integrate ``ens.n_paths`` trajectories (a single ``u0`` is replicated)."""
    u0 = u0.physical()
    if not u0.batch_shape:
        u0 = tile(u0, ens.n_paths)
    if u0.batch_shape != (ens.n_paths,):
        raise ValueError(f"initial batch {u0.batch_shape} does not match n_paths={ens.n_paths}")
    n = step_count(ens.horizon, step.dt)
    rec, _, _ = evolve(u0.values, u0.grid, params, Q, n, step, ens.seed, ens.ids,
                       track_gamma=track_gamma, on_blowup="mask")
    return rec


# -- moment bounds ---------------------------------------------------------------------------


@dataclass
class MomentReport:
    n: int
    times: np.ndarray
    curve: np.ndarray
    stderr: np.ndarray
    decay_term: np.ndarray
    noise_term: float
    fitted_constant: float
    plateau: float
    plateau_stderr: float
    plateau_window: tuple[float, float]
    lam: float
    n_paths: int
    excluded: int
    failed: bool
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(n=self.n, fitted_constant=self.fitted_constant, plateau=self.plateau,
                    plateau_stderr=self.plateau_stderr, plateau_window=list(self.plateau_window),
                    lam=self.lam, n_paths=self.n_paths, excluded=self.excluded,
                    failed=self.failed, noise_term=self.noise_term, **self.extras)


def _mean_curve(series: np.ndarray, keep: np.ndarray):
    x = series[keep]
    m = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(len(x)) if len(x) > 1 else np.zeros_like(m)
    return m, se


def _moment_report(series, blown, times, n, lam, decay_rate, noise_term, plateau_from):
    blown = np.asarray(blown).reshape(len(series), -1).any(axis=1)
    keep = ~blown
    if not keep.any():
        raise RuntimeError("every path blew up")
    curve, se = _mean_curve(series, keep)
    decay = np.exp(-decay_rate * times) * curve[0]
    excess = curve - decay
    fitted = float(np.max(excess) / noise_term) if noise_term > 0 else (
        0.0 if np.all(excess <= 1e-12 * max(curve[0], 1.0)) else math.inf)
    t0 = plateau_from * times[-1]
    w = times >= t0
    per_path = series[keep][:, w].mean(axis=1)
    plateau = float(per_path.mean())
    plateau_se = float(per_path.std(ddof=1) / math.sqrt(len(per_path))) if len(per_path) > 1 else 0.0
    excluded = int(blown.sum())
    failed = excluded > 0.01 * len(series)
    return MomentReport(n, times, curve, se, decay, noise_term, max(fitted, 0.0), plateau,
                        plateau_se, (float(t0), float(times[-1])), lam, len(series), excluded,
                        failed)


def moment_check_h(ensemble: TrajectoryRecord, n: int, Q: CovarianceSpec,
                   plateau_from: float = 0.5) -> MomentReport:
    """Empirical ``E||u(t)||^{2n}`` against ``e^{-n lam t} E||u0||^{2n} + C ||Q||_HS^{2n} / lam^n``.

    ``fitted_constant`` is the smallest ``C`` making the bound hold at every
    sample time. The plateau is the time average over the last
    ``1 - plateau_from`` of the horizon.
    """
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    p = ensemble.params
    grid = ensemble.final_state.grid
    series = np.asarray(ensemble.mass) ** n
    noise = hs_norm(Q, 0, grid) ** (2 * n) / p.lam**n if p.lam > 0 else math.inf
    return _moment_report(series, ensemble.blown_up, ensemble.times, n, p.lam, n * p.lam, noise,
                          plateau_from)


def moment_check_phi(ensemble: TrajectoryRecord, n: int, Q: CovarianceSpec,
                     plateau_from: float = 0.5) -> MomentReport:
    """Empirical ``E Phi(u(t))^n`` against the decay term plus the noise terms.

    The noise bracket is ``||Q||_{H^1}^{2n}/lam^n + ||Q||_{H^1}^{2n(1+s)}/lam^{n(1+s)}``
    (plus ``||Q||_H^{2n s_d}/lam^{n s_d}`` in the focusing case). The decay term
    uses rate ``n lam``; the fitted constant absorbs the difference.
    """
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    p = ensemble.params
    grid = ensemble.final_state.grid
    q1 = hs_norm(Q, 1, grid)
    noise = q1 ** (2 * n) / p.lam**n + q1 ** (2 * n * (1 + p.sigma)) / p.lam ** (n * (1 + p.sigma))
    powers = [float(n), n * (1 + p.sigma)]
    if p.alpha == 1:
        sd = p.sigma_d
        noise += hs_norm(Q, 0, grid) ** (2 * n * sd) / p.lam ** (n * sd)
        powers.append(n * sd)
    series = np.asarray(ensemble.phi) ** n
    rep = _moment_report(series, ensemble.blown_up, ensemble.times, n, p.lam, n * p.lam, noise,
                         plateau_from)
    rep.extras["lambda_powers"] = powers
    return rep


def plateau_scaling(report_a: MomentReport, report_b: MomentReport,
                    powers: Optional[Sequence[float]] = None) -> dict:
    """Plateau ratio and its implied power of ``lam`` between two damping values.

    With ``powers`` (the candidate exponents of ``1/lam`` in the bound) the
    closest one is reported as the dominant term.
    """
    ratio = report_a.plateau / report_b.plateau
    exponent = math.log(ratio) / math.log(report_b.lam / report_a.lam)
    out = dict(lam_a=report_a.lam, lam_b=report_b.lam, ratio=ratio, exponent=exponent)
    if powers:
        best = min(powers, key=lambda pw: abs(pw - exponent))
        out.update(dominant_power=best, exponent_error=exponent - best)
    return out


# -- stochastic convolution ----------------------------------------------------------


def gamma_paths(Q: CovarianceSpec, grid: Grid, lam: float, horizon: float, dt: float,
                seed: int, ids, stride: int = 1):
    """Exact co-evolution of ``Gamma`` alone for a batch of ids.

    Returns ``(times, coefficients)`` with coefficients shaped
    ``(M, n_samples) + grid.shape``.
    """
    ids = np.atleast_1d(np.asarray(ids))
    n = step_count(horizon, dt)
    P = propagator(grid, lam, dt)
    std = np.sqrt(ou_variance(Q.coefficients(grid), lam, dt))
    g = np.zeros((ids.size,) + grid.shape, complex)
    times, out = [0.0], [g.copy()]
    for j in range(n):
        g = P * g + std * unit_noise(Q, grid, seed, ids, j)
        if (j + 1) % stride == 0:
            times.append((j + 1) * dt)
            out.append(g.copy())
    return np.asarray(times), np.stack(out, axis=1)


@dataclass
class GammaMomentReport:
    n: int
    lam: float
    times: np.ndarray
    mean_integral: np.ndarray
    """``E int_0^t ||Gamma||^{2n} ds`` per sample time."""
    reference: float
    """``||Q||_HS^{2n} / lam^n``."""
    fitted_c: float
    fitted_c_half: float
    stability: float
    n_paths: int

    def as_dict(self) -> dict:
        return dict(n=self.n, lam=self.lam, reference=self.reference, fitted_c=self.fitted_c,
                    fitted_c_half=self.fitted_c_half, stability=self.stability,
                    n_paths=self.n_paths)


def gamma_moment_check(ensemble: TrajectoryRecord, n: int, Q: CovarianceSpec) -> GammaMomentReport:
    """``E int_0^t ||Gamma||^{2n} ds`` against ``c ||Q||^{2n} t / lam^n``.

    ``c`` is fitted at the full horizon and at half of it; ``stability`` is their
    relative difference.
    """
    if ensemble.gamma_norm is None:
        raise ValueError("ensemble was recorded without the stochastic convolution")
    lam = ensemble.params.lam
    grid = ensemble.final_state.grid
    t = ensemble.times
    integ = cumulative_trapezoid(np.asarray(ensemble.gamma_norm) ** (2 * n), t, initial=0.0,
                                 axis=-1)
    mean = integ.reshape(-1, len(t)).mean(axis=0)
    ref = hs_norm(Q, 0, grid) ** (2 * n) / lam**n
    if ref == 0:
        return GammaMomentReport(n, lam, t, mean, 0.0, 0.0, 0.0, 0.0, integ.shape[0])
    half = int(np.searchsorted(t, t[-1] / 2))
    c_full = float(mean[-1] / (ref * t[-1]))
    c_half = float(mean[half] / (ref * t[half]))
    return GammaMomentReport(n, lam, t, mean, ref, c_full, c_half,
                             abs(c_full - c_half) / c_full, integ.shape[0])


# -- observables and mixing -------------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """A function of a batch of physical fields returning one real per field."""

    name: str
    func: Callable[[np.ndarray, Grid], np.ndarray]

    def __call__(self, u: Field | np.ndarray, grid: Optional[Grid] = None) -> np.ndarray:
        if isinstance(u, Field):
            return self.func(u.physical().values, u.grid)
        return self.func(u, grid)


def _l2(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.sqrt((np.abs(values) ** 2).sum(axis=grid.axes) * grid.cell_volume)


def reference_fields(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Fixed smooth reference ``g`` and unit-norm direction ``phi`` used by the observables."""
    L = grid.box_length
    r2_g = sum((x - 0.35 * L) ** 2 for x in grid.coordinates)
    r2_p = sum((x - 0.5 * L) ** 2 for x in grid.coordinates)
    g = 0.5 * np.exp(-r2_g / 2.0) * (1 + 0.5j)
    phi = np.exp(-r2_p / 2.0).astype(complex)
    phi /= _l2(phi, grid)
    return g, phi


def shipped_observables(grid: Grid) -> dict[str, Observable]:
    """``f1 = d1(u, 0)``, ``f2 = sin(min(||u - g||, 1))`` and ``f3 = clip(Re<u, phi>, -1/2, 1/2)``.

    All three are 1-Lipschitz for ``d1(u, v) = min(||u - v||_H, 1)``; ``f3`` is
    clipped at 1/2 so that its range has width 1, which keeps the constant at 1
    on pairs farther apart than 1.
    """
    g, phi = reference_fields(grid)

    def f1(v, gr):
        return np.minimum(_l2(v, gr), 1.0)

    def f2(v, gr):
        return np.sin(np.minimum(_l2(v - g, gr), 1.0))

    def f3(v, gr):
        ip = (v * np.conj(phi)).real.sum(axis=gr.axes) * gr.cell_volume
        return np.clip(ip, -0.5, 0.5)

    return {"f1": Observable("f1", f1), "f2": Observable("f2", f2), "f3": Observable("f3", f3)}


def lipschitz_spot_check(obs: Observable, grid: Grid, rng: np.random.Generator,
                         n_pairs: int = 200, tol: float = 1e-9) -> float:
    """Largest finite-difference ratio ``|f(u) - f(v)| / d1(u, v)`` over random pairs.

    Pairs mix independent draws with small perturbations at several scales.
    Raises ``ValueError`` if the ratio exceeds ``1 + tol``.
    """
    u = random_smooth_fields(grid, n_pairs, rng).values
    v = random_smooth_fields(grid, n_pairs, rng).values
    scales = 10.0 ** rng.uniform(-6, 0.5, n_pairs)
    near = rng.random(n_pairs) < 0.5
    v = np.where(near[(...,) + (None,) * grid.dim], u + scales[(...,) + (None,) * grid.dim] * v, v)
    d = np.minimum(_l2(u - v, grid), 1.0)
    df = np.abs(obs(u, grid) - obs(v, grid))
    ok = d > 0
    worst = float(np.max(df[ok] / d[ok])) if ok.any() else 0.0
    if worst > 1 + tol:
        raise ValueError(f"observable {obs.name} has finite-difference Lipschitz ratio {worst:.4g} > 1")
    return worst


@dataclass
class RateFit:
    observable: str
    times: np.ndarray
    gap: np.ndarray
    noise_floor: np.ndarray
    fit_window: tuple[float, float]
    power_exponent: float
    """Slope of ``log gap`` against ``log(1 + t)`` on the window (decay when negative)."""
    power_residual: float
    exp_rate: float
    """Minus the slope of ``log gap`` against ``t`` on the window."""
    exp_residual: float
    trend_tau: float
    trend_pvalue: float
    floor_time: Optional[float]
    """First sample time after burn-in at which the gap is below the noise floor."""

    @property
    def hits_floor(self) -> bool:
        return self.floor_time is not None

    def as_dict(self) -> dict:
        return dict(observable=self.observable, fit_window=list(self.fit_window),
                    power_exponent=self.power_exponent, power_residual=self.power_residual,
                    exp_rate=self.exp_rate, exp_residual=self.exp_residual,
                    trend_tau=self.trend_tau, trend_pvalue=self.trend_pvalue,
                    floor_time=self.floor_time)


def _linfit(x, y):
    if len(x) < 2:
        return math.nan, math.nan
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), resid


def fit_rate(name: str, times, gap, floor, burn_in: float = 0.0, floor_factor: float = 3.0) -> RateFit:
    """Fit decay rates on ``[burn_in, first time gap < floor_factor * floor)``."""
    times, gap, floor = (np.asarray(a, float) for a in (times, gap, floor))
    after = times >= burn_in
    below = after & (gap < floor_factor * floor)
    end = int(np.argmax(below)) if below.any() else len(times)
    win = after & (np.arange(len(times)) < end) & (gap > 0)
    t, g = times[win], gap[win]
    pe, pr = _linfit(np.log1p(t), np.log(g)) if len(t) >= 2 else (math.nan, math.nan)
    er, err = _linfit(t, np.log(g)) if len(t) >= 2 else (math.nan, math.nan)
    if len(t) >= 3:
        res = kendalltau(t, g, alternative="less")
        tau, pv = float(res.statistic), float(res.pvalue)
    else:
        tau, pv = math.nan, math.nan
    hit = after & (gap <= floor)
    ftime = float(times[np.argmax(hit)]) if hit.any() else None
    window = (float(t[0]), float(t[-1])) if len(t) else (math.nan, math.nan)
    return RateFit(name, times, gap, floor, window, pe, pr, -er, err, tau, pv, ftime)


def _coupled_observables(u0_1: Field, u0_2: Field, params, Q, ens: EnsembleConfig,
                         step: StepConfig, observables: dict[str, Observable], common: bool = True):
    grid = u0_1.grid
    a, b = u0_1.physical().values, u0_2.physical().values
    m = ens.n_paths
    a = np.broadcast_to(a, (m,) + grid.shape)
    b = np.broadcast_to(b, (m,) + grid.shape)
    n = step_count(ens.horizon, step.dt)
    times, vals = [], {k: [] for k in observables}

    if common:
        values, ids, pair_axis = np.stack([a, b], axis=1), ens.ids, 1

        def split(v):
            return v[:, 0], v[:, 1]
    else:
        values = np.concatenate([a, b], axis=0)
        ids = np.concatenate([ens.ids, ens.ids + 2**40])
        pair_axis = None

        def split(v):
            return v[:m], v[m:]

    def cb(t, v):
        times.append(t)
        v1, v2 = split(v)
        for k, f in observables.items():
            vals[k].append((f(v1, grid), f(v2, grid)))

    rec, _, _ = evolve(values, grid, params, Q, n, step, ens.seed, ids, on_blowup="mask",
                       pair_axis=pair_axis, callback=cb)
    out = {k: np.asarray(v) for k, v in vals.items()}  # (S, 2, M)
    return np.asarray(times), out, rec


def mixing_rate(u0_1: Field, u0_2: Field, params: ModelParams, Q: CovarianceSpec,
                ens: EnsembleConfig, step: StepConfig,
                observables: Optional[dict[str, Observable]] = None, burn_in: float = 0.0,
                lipschitz_check: bool = True) -> dict[str, RateFit]:
    """Gap ``|E f(u_1(t)) - E f(u_2(t))|`` under common noise, one RateFit per observable.

    The noise floor is ``sqrt((Var f(u_1) + Var f(u_2)) / M)``, the standard error
    the gap would have without common noise.
    """
    grid = u0_1.grid
    if observables is None:
        shipped = shipped_observables(grid)
        observables = {k: shipped[k] for k in ens.observables}
    if lipschitz_check:
        rng = np.random.default_rng(12345)
        for f in observables.values():
            lipschitz_spot_check(f, grid, rng)
    times, vals, _ = _coupled_observables(u0_1, u0_2, params, Q, ens, step, observables)
    m = ens.n_paths
    out = {}
    for k, v in vals.items():
        f1, f2 = v[:, 0], v[:, 1]
        gap = np.abs(f1.mean(axis=1) - f2.mean(axis=1))
        if m > 1:
            floor = np.sqrt((f1.var(axis=1, ddof=1) + f2.var(axis=1, ddof=1)) / m)
        else:
            floor = np.zeros_like(gap)
        out[k] = fit_rate(k, times, gap, floor, burn_in)
    return out


def variance_reduction(u0_1: Field, u0_2: Field, params: ModelParams, Q: CovarianceSpec,
                       ens: EnsembleConfig, step: StepConfig,
                       observables: Optional[dict[str, Observable]] = None) -> dict[str, dict]:
    """Time-averaged variance of the gap estimator with common vs independent noise."""
    grid = u0_1.grid
    observables = observables or shipped_observables(grid)
    m = ens.n_paths
    out = {}
    _, vc, _ = _coupled_observables(u0_1, u0_2, params, Q, ens, step, observables, common=True)
    _, vi, _ = _coupled_observables(u0_1, u0_2, params, Q, ens, step, observables, common=False)
    for k in observables:
        common = (vc[k][:, 0] - vc[k][:, 1]).var(axis=1, ddof=1) / m
        indep = (vi[k][:, 0].var(axis=1, ddof=1) + vi[k][:, 1].var(axis=1, ddof=1)) / m
        out[k] = dict(common=float(common.mean()), independent=float(indep.mean()))
    return out


# -- irreducibility --------------------------------------------------------------------------


def scale_to_phi(fields: Field, params: ModelParams, target: float) -> Field:
    """Rescale each field (by bisection on the amplitude) so that its functional is ``<= target``."""
    vals = fields.physical().values.reshape((-1,) + fields.grid.shape).copy()
    for i, v in enumerate(vals):
        def phi_at(s):
            g, p, mass = functional_parts(Field(fields.grid, s * v), params.sigma)
            return combine_phi(params.alpha, params.sigma, params.dim, params.kappa, g, p, mass)

        if phi_at(1.0) <= target:
            continue
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if phi_at(mid) <= target else (lo, mid)
        vals[i] = lo * v
    return Field(fields.grid, vals.reshape(fields.values.shape))


def sample_initial_pairs(grid: Grid, params: ModelParams, R: float, m: int,
                         rng: np.random.Generator) -> tuple[Field, Field]:
    """Random smooth pairs with pair functional ``<= R`` (each member ``<= R/2``)."""
    a = scale_to_phi(random_smooth_fields(grid, m, rng), params, R / 2)
    b = scale_to_phi(random_smooth_fields(grid, m, rng), params, R / 2)
    return a, b


@dataclass
class IrreducibilityReport:
    R: float
    r: float
    times: np.ndarray
    proportions: list[Proportion]
    first_positive_time: Optional[float]
    """Smallest tested time whose Wilson interval excludes 0."""

    def at(self, t: float) -> Proportion:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.proportions[i]

    def as_dict(self) -> dict:
        return dict(R=self.R, r=self.r, first_positive_time=self.first_positive_time,
                    table=[dict(t=float(t), **p.as_dict()) for t, p in
                           zip(self.times, self.proportions)])


def irreducibility_probe(R: float, r: float, t: float, u0_1: Field, u0_2: Field,
                         params: ModelParams, Q: CovarianceSpec, step: StepConfig, seed: int,
                         test_times: Optional[Sequence[float]] = None) -> IrreducibilityReport:
    """Empirical ``P(Phi(u_1(t)) + Phi(u_2(t)) <= r)`` over coupled pairs started in the R-ball."""
    grid = u0_1.grid
    a, b = u0_1.physical().values, u0_2.physical().values
    if a.ndim == grid.dim:
        a, b = a[None], b[None]
    g1, p1, m1 = functional_parts(Field(grid, a), params.sigma)
    g2, p2, m2 = functional_parts(Field(grid, b), params.sigma)
    start = (combine_phi(params.alpha, params.sigma, params.dim, params.kappa, g1, p1, m1)
             + combine_phi(params.alpha, params.sigma, params.dim, params.kappa, g2, p2, m2))
    if np.any(np.asarray(start) > R * (1 + 1e-12)):
        raise ValueError(f"initial pairs must satisfy pair functional <= R={R}")
    m = a.shape[0]
    n = step_count(t, step.dt)
    rec, _, _ = evolve(np.stack([a, b], axis=1), grid, params, Q, n, step, seed, np.arange(m),
                       on_blowup="mask", pair_axis=1)
    pair = rec.phi[:, 0] + rec.phi[:, 1]
    ok = ~rec.blown_up.any(axis=1)
    tt = [t] if test_times is None else sorted(set(list(test_times) + [t]))
    times, props = [], []
    for s in tt:
        i = int(np.argmin(np.abs(rec.times - s)))
        times.append(rec.times[i])
        props.append(wilson(int(np.sum(pair[ok, i] <= r)), int(ok.sum())))
    first = next((float(s) for s, p in zip(times, props) if p.ci_low is not None and p.ci_low > 0),
                 None)
    return IrreducibilityReport(R, r, np.asarray(times), props, first)


# -- time-integrated sup norm ----------------------------------------------------------------


@dataclass
class StrichartzReport:
    n_sigma: int
    times: np.ndarray
    lhs: np.ndarray
    rhs_unit: np.ndarray
    """The bracket multiplying ``C_sigma``; ``lhs <= C_sigma * rhs_unit`` after fitting."""
    fitted_c: float
    violation_fraction: float

    def as_dict(self) -> dict:
        return dict(n_sigma=self.n_sigma, fitted_c=self.fitted_c,
                    violation_fraction=self.violation_fraction)


def strichartz_integral(traj: TrajectoryRecord, n_sigma: Optional[int] = None,
                        c1n: float = 1.0, c_sigma: Optional[float] = None) -> StrichartzReport:
    """``int_0^t ||u||_inf^{2 sigma}`` against
    ``C (int_0^t [c1n Phi^m + m ||Gamma||^m + m ||Lap Gamma||^m] + ||u0||_{H^1}^{2 sigma} + 1 + t)``.

    ``m = n_sigma`` defaults to ``ceil(max(sigma, 1))``. ``C`` is fitted as the
    smallest value that holds at every sample time of every path unless
    ``c_sigma`` is given, in which case the violation fraction is measured.
    """
    if traj.gamma_norm is None:
        raise ValueError("trajectory was recorded without the stochastic convolution")
    sigma = traj.params.sigma
    m = n_sigma if n_sigma is not None else int(math.ceil(max(sigma, 1.0)))
    t = traj.times
    lhs = cumulative_trapezoid(np.asarray(traj.sup_norm) ** (2 * sigma), t, initial=0.0, axis=-1)
    integrand = (c1n * np.asarray(traj.phi) ** m + m * np.asarray(traj.gamma_norm) ** m
                 + m * np.asarray(traj.gamma_lap_norm) ** m)
    h1_0 = np.sqrt(traj.functionals.grad_sq[..., 0] + traj.mass[..., 0])
    rhs = (cumulative_trapezoid(integrand, t, initial=0.0, axis=-1)
           + (h1_0 ** (2 * sigma))[..., None] + 1.0 + t)
    ratio = lhs / rhs
    fitted = float(np.max(ratio))
    c = fitted if c_sigma is None else c_sigma
    viol = float(np.mean(lhs > c * rhs * (1 + 1e-12)))
    return StrichartzReport(m, t, lhs, rhs, fitted, viol)


# -- dispersive decay ------------------------------------------------------------------------


def _conjugate(p: float) -> float:
    if p == 1:
        return math.inf
    if math.isinf(p):
        return 1.0
    return p / (p - 1)


def wraparound_time(u0: Field, rel: float = 1e-3) -> tuple[float, float]:
    """``(t_wrap, k_max)``: ``L / (2 * 2 k_max)`` where the spectrum drops below ``rel``."""
    c = np.abs(u0.spectral().values)
    kabs = np.sqrt(u0.grid.k_squared)
    sig = kabs[c >= rel * c.max()]
    k_max = float(sig.max()) if sig.size else 0.0
    if k_max == 0:
        return math.inf, 0.0
    return u0.grid.box_length / (4.0 * k_max), k_max


@dataclass
class DispersiveReport:
    dim: int
    p: float
    s: float
    times: np.ndarray
    ratio: np.ndarray
    valid: np.ndarray
    t_wrap: float
    k_max: float
    slope: float
    slope_window: tuple[float, float]
    slope_residual: float
    expected_slope: float
    bound_holds: bool
    flagged_times: list[float]

    def as_dict(self) -> dict:
        return dict(dim=self.dim, p=self.p if math.isfinite(self.p) else "inf", s=self.s,
                    t_wrap=self.t_wrap, k_max=self.k_max, slope=self.slope,
                    slope_window=list(self.slope_window), slope_residual=self.slope_residual,
                    expected_slope=self.expected_slope, bound_holds=self.bound_holds,
                    max_ratio=float(np.max(self.ratio[self.valid])) if self.valid.any() else None,
                    flagged_times=self.flagged_times)


def dispersive_decay_check(u0: Field, times: Sequence[float], p: float = math.inf, s: float = 0.0,
                           tol: float = 1e-6, fit_from: float = 0.4) -> DispersiveReport:
    """Free Schrodinger flow against ``(4 pi t)^{-d(1/2 - 1/p)} ||u0||_{H^{s,p'}}``.

    Times at or beyond the wraparound horizon are flagged and excluded. The
    sup-norm decay slope is fitted on ``[fit_from * t_wrap, t_wrap)``.
    """
    if p < 2:
        raise ValueError("p must be in [2, inf]")
    times = np.asarray(times, float)
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    grid = u0.grid
    d = grid.dim
    c0 = u0.spectral().values
    t_wrap, k_max = wraparound_time(u0)
    expo = d * (0.5 - (0.0 if math.isinf(p) else 1.0 / p))
    ref = norm_hsp(u0, s, _conjugate(p))
    ratio, sup = [], []
    for t in times:
        ut = Field(grid, np.exp(1j * grid.k_squared * t) * c0, "spectral")
        ratio.append(norm_hsp(ut, s, p) / ((4 * math.pi * t) ** (-expo) * ref))
        sup.append(float(np.abs(ut.physical().values).max()))
    ratio, sup = np.asarray(ratio), np.asarray(sup)
    valid = times < t_wrap
    flagged = [float(t) for t in times[~valid]]
    win = valid & (times >= fit_from * t_wrap)
    slope, resid = _linfit(np.log(times[win]), np.log(sup[win])) if win.sum() >= 2 else (math.nan, math.nan)
    bound = bool(np.all(ratio[valid] <= 1 + tol))
    wnd = (float(times[win][0]), float(times[win][-1])) if win.any() else (math.nan, math.nan)
    return DispersiveReport(d, p, s, times, ratio, valid, t_wrap, k_max, slope, wnd, resid,
                            -d / 2, bound, flagged)


# -- exponents and nonlinear bounds ------------------------------------------------------------


def admissible_pair_check(gamma: float, r: float, dim: int) -> tuple[bool, str]:
    """Whether ``(gamma, r)`` satisfies ``2/gamma + d/r = d/2`` with the per-dimension range of r."""
    if dim not in (1, 2, 3):
        return False, f"dimension must be 1, 2 or 3, got {dim}"
    if gamma < 2:
        return False, f"gamma={gamma} < 2"
    if math.isinf(r) and gamma == 2:
        return False, "(2, inf) is excluded"
    inv = lambda v: 0.0 if math.isinf(v) else 1.0 / v  # noqa: E731
    lhs = 2 * inv(gamma) + dim * inv(r)
    if not math.isclose(lhs, dim / 2, rel_tol=1e-12, abs_tol=1e-12):
        return False, f"2/gamma + d/r = {lhs:g} differs from d/2 = {dim / 2:g}"
    if r < 2:
        return False, f"r={r} < 2"
    if dim == 2 and math.isinf(r):
        return False, "r must be finite in dimension 2"
    if dim >= 3 and r > 2 * dim / (dim - 2):
        return False, f"r={r} exceeds 2d/(d-2) = {2 * dim / (dim - 2):g}"
    return True, "admissible"


def nonlinearity_window(sigma: float, dim: int, p: float) -> Optional[str]:
    """Return the violated condition for ``p`` (None when ``p`` is admissible)."""
    if dim == 2:
        if not 1 <= p < 2:
            return f"d=2 needs 1 <= p < 2, got p={p}"
        if p < 2 / (2 * sigma + 1):
            return f"d=2 needs p >= 2/(2 sigma+1) = {2 / (2 * sigma + 1):g}, got p={p}"
        return None
    if dim == 3:
        lo, hi = 2 / (2 * sigma + 1), 6 / (2 * sigma + 3)
        if p < lo - 1e-12:
            return f"d=3 needs p >= 2/(2 sigma+1) = {lo:g}, got p={p}"
        if p > hi + 1e-12:
            return f"d=3 needs p <= 6/(2 sigma+3) = {hi:g}, got p={p}"
        if not p < 2:
            return f"d=3 needs p < 2, got p={p}"
        return None
    return f"the bound is stated for d=2 or d=3, got d={dim}"


@dataclass
class NonlinearityReport:
    sigma: float
    dim: int
    p: float
    max_ratio: Optional[float]
    half_max_ratio: Optional[float]
    stability: Optional[float]
    n_used: int
    n_skipped: int

    def as_dict(self) -> dict:
        return dict(sigma=self.sigma, dim=self.dim, p=self.p, max_ratio=self.max_ratio,
                    half_max_ratio=self.half_max_ratio, stability=self.stability,
                    n_used=self.n_used, n_skipped=self.n_skipped)


def nonlinearity_ratios(sigma: float, p: float, ensemble: Field) -> np.ndarray:
    """``||F(u)||_{H^{1,p}} / ||u||_{H^1}^{1+2 sigma}`` per field, ``F(u) = |u|^{2 sigma} u``; NaN for u = 0."""
    u = ensemble.physical()
    vals = u.values.reshape((-1,) + u.grid.shape)
    out = np.full(len(vals), np.nan)
    for i, v in enumerate(vals):
        f = Field(u.grid, v)
        h1 = norm_sobolev(f, 1)
        if h1 == 0:
            continue
        F = Field(u.grid, np.abs(v) ** (2 * sigma) * v)
        out[i] = norm_hsp(F, 1, p) / h1 ** (1 + 2 * sigma)
    return out


def nonlinearity_bound_check(sigma: float, dim: int, p: float, ensemble: Field) -> NonlinearityReport:
    """Largest ratio over the ensemble, and over its first half for the doubling check."""
    why = nonlinearity_window(sigma, dim, p)
    if why is not None:
        raise ValueError(why)
    if ensemble.grid.dim != dim:
        raise ValueError("ensemble grid dimension differs from dim")
    r = nonlinearity_ratios(sigma, p, ensemble)
    used = ~np.isnan(r)
    if not used.any():
        return NonlinearityReport(sigma, dim, p, None, None, None, 0, len(r))
    half = r[: max(1, len(r) // 2)]
    full_max = float(np.nanmax(r))
    half_max = float(np.nanmax(half)) if np.any(~np.isnan(half)) else None
    stab = abs(full_max - half_max) / full_max if half_max is not None else None
    return NonlinearityReport(sigma, dim, p, full_max, half_max, stab, int(used.sum()),
                              int((~used).sum()))
