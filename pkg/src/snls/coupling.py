"""Synchronous coupling of two trajectories driven by one noise path.

Both members of a pair consume identical increments, so the difference
``w = u_1 - u_2`` obeys a noise-free equation. This module records ``w``,
checks the pathwise contraction inequality step by step, builds the energy
process ``E_n`` and evaluates the coupling-event index ``ell_{theta,beta}``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from statsmodels.stats.proportion import proportion_confint

from .integrator import StepConfig, TrajectoryRecord, evolve, step_count
from .model import ModelParams
from .noise import CovarianceSpec, NoiseStream
from .spectral import Field


@dataclass(frozen=True)
class CouplingConfig:
    """Parameters of the coupling event ``P_{l,k}``.

    ``slope_constant`` is the slope ``K`` of the affine envelope
    ``theta + beta**n + K (t - lT)``; leave it ``None`` and call
    :func:`fit_slope_constant` on a calibration ensemble to fit it.
    """

    theta: float
    beta: float
    block_length: float
    moment_index: int = 1
    c1n: float = 1.0
    slope_constant: Optional[float] = None

    def __post_init__(self):
        for name in ("theta", "beta", "block_length", "c1n"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.moment_index) != self.moment_index or self.moment_index < 1:
            raise ValueError(f"moment_index must be an integer >= 1, got {self.moment_index}")
        if self.slope_constant is not None and not self.slope_constant > 0:
            raise ValueError(f"slope_constant must be positive, got {self.slope_constant}")

    def with_slope(self, k: float) -> "CouplingConfig":
        return CouplingConfig(self.theta, self.beta, self.block_length, self.moment_index,
                              self.c1n, k)


@dataclass
class CouplingRecord:
    times: np.ndarray
    w_norm_series: np.ndarray
    d1_series: np.ndarray
    phi_1: np.ndarray
    phi_2: np.ndarray
    sup_1: np.ndarray
    sup_2: np.ndarray
    mass_1: np.ndarray
    mass_2: np.ndarray
    gamma_norm: Optional[np.ndarray]
    gamma_lap_norm: Optional[np.ndarray]
    params: ModelParams
    dt: float
    seed: int = 0
    trajectory_id: int = 0
    blown_up: bool = False
    en_series_1: Optional[np.ndarray] = None
    en_series_2: Optional[np.ndarray] = None
    ell_outcomes: Optional[np.ndarray] = None
    certificate_margins: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def phi_pair_series(self) -> np.ndarray:
        return self.phi_1 + self.phi_2

    def member(self, i: int) -> TrajectoryRecord:
        """View of one member as a trajectory record (functionals limited to ``phi``/mass)."""
        from .model import FunctionalReport

        phi = self.phi_1 if i == 0 else self.phi_2
        mass = self.mass_1 if i == 0 else self.mass_2
        sup = self.sup_1 if i == 0 else self.sup_2
        nan = np.full_like(phi, np.nan)
        rep = FunctionalReport(phi, nan, nan, mass, self.times)
        return TrajectoryRecord(self.times, rep, sup, None, self.gamma_norm,
                                self.gamma_lap_norm, dt=self.dt, params=self.params)


# -- driving -----------------------------------------------------------------------


def couple_ensemble(u0_1: Field, u0_2: Field, params: ModelParams, Q: CovarianceSpec,
                    horizon: float, cfg: StepConfig, seed: int, ids=None,
                    coupling_cfg: Optional[CouplingConfig] = None,
                    c_hat: Optional[float] = None, track_gamma: bool = True,
                    on_blowup: str = "mask") -> list[CouplingRecord]:
    """Run ``M`` synchronously coupled pairs in one vectorized batch.

    ``u0_1`` and ``u0_2`` are either single fields (one pair) or batches of
    shape ``(M,)``. Pair ``j`` uses trajectory id ``ids[j]`` (default ``j``) for
    both members. When ``coupling_cfg`` has a slope constant, the energy series
    and ``ell`` outcomes are filled in; when ``c_hat`` is given, the
    certificate margins are too.
    """
    if u0_1.grid != u0_2.grid:
        raise ValueError("initial fields live on different grids")
    grid = u0_1.grid
    a, b = u0_1.physical().values, u0_2.physical().values
    if a.shape != b.shape:
        raise ValueError("initial ensembles differ in shape")
    if a.ndim == grid.dim:
        a, b = a[None], b[None]
    if a.ndim != grid.dim + 1:
        raise ValueError("initial fields must be single fields or 1-D batches")
    m = a.shape[0]
    ids = np.arange(m) if ids is None else np.atleast_1d(np.asarray(ids))
    values = np.stack([a, b], axis=1)
    if params.alpha == 1 and params.kappa is None:
        raise ValueError("focusing coupling needs params.kappa (see choose_kappa)")
    n = step_count(horizon, cfg.dt)
    rec, _, _ = evolve(values, grid, params, Q, n, cfg, seed, ids, 0, track_gamma,
                       on_blowup, pair_axis=1)
    out = []
    for j in range(m):
        w = rec.w_norm[j]
        cr = CouplingRecord(
            times=rec.times, w_norm_series=w, d1_series=np.minimum(w, 1.0),
            phi_1=rec.phi[j, 0], phi_2=rec.phi[j, 1],
            sup_1=rec.sup_norm[j, 0], sup_2=rec.sup_norm[j, 1],
            mass_1=rec.mass[j, 0], mass_2=rec.mass[j, 1],
            gamma_norm=None if rec.gamma_norm is None else rec.gamma_norm[j],
            gamma_lap_norm=None if rec.gamma_lap_norm is None else rec.gamma_lap_norm[j],
            params=params, dt=cfg.dt, seed=seed, trajectory_id=int(ids[j]),
            blown_up=bool(np.any(rec.blown_up[j])),
        )
        if coupling_cfg is not None and track_gamma:
            cr.en_series_1, cr.en_series_2 = pair_en_series(cr, coupling_cfg)
            if coupling_cfg.slope_constant is not None:
                cr.ell_outcomes = ell_all(cr, coupling_cfg)
        if c_hat is not None:
            cr.certificate_margins = pathwise_certificate(cr, params, c_hat).margins
        out.append(cr)
    return out


def couple_integrate(u0_1: Field, u0_2: Field, params: ModelParams, Q: CovarianceSpec,
                     horizon: float, cfg: StepConfig, stream: NoiseStream,
                     coupling_cfg: Optional[CouplingConfig] = None,
                     c_hat: Optional[float] = None) -> CouplingRecord:
    """Integrate one synchronously coupled pair; both members use ``stream``'s draws."""
    if u0_1.batch_shape or u0_2.batch_shape:
        raise ValueError("couple_integrate takes single fields; use couple_ensemble for batches")
    return couple_ensemble(u0_1, u0_2, params, Q, horizon, cfg, stream.seed,
                           [stream.trajectory_id], coupling_cfg, c_hat, on_blowup="raise")[0]


# -- pathwise certificate ---------------------------------------------------------------


@dataclass
class CertificateReport:
    margins: np.ndarray
    """RHS - LHS per step; NaN where ``w`` sits at the round-off floor."""
    lhs: np.ndarray
    rhs: np.ndarray
    checked: np.ndarray
    allowance: np.ndarray
    """Per-step tolerance: ``tolerance`` plus the round-off bound on the log increment."""
    violation_fraction: float
    n_checked: int
    tolerance: float

    @property
    def violations(self) -> np.ndarray:
        return self.checked & (self.margins < -self.allowance)


def pathwise_certificate(record: CouplingRecord, params: ModelParams, c_hat: float,
                         tolerance: float = 1e-9, floor: float = 1e-11,
                         roundoff: float = 1e-13) -> CertificateReport:
    """Discrete check of the contraction inequality for ``||w||_H^2``.

    Between consecutive samples the growth rate ``log(|w|^2_{i+1}/|w|^2_i)/dt``
    is compared with the trapezoid average of
    ``-2 lam + c_hat (||u_1||_inf^{2 sigma} + ||u_2||_inf^{2 sigma})``. The log form is
    the integrated version of the differential inequality and is exact for the
    linear equation.

    ``w`` is computed as a difference of two states of size
    ``S = ||u_1|| + ||u_2||``, so it carries an absolute error of order
    ``roundoff * S``. A step counts as a violation only if its margin is below
    ``-(tolerance + roundoff * S / (||w|| dt))``; steps with ``||w|| <= floor * S``
    are not checked at all.
    """
    t = np.asarray(record.times, float)
    w = np.asarray(record.w_norm_series, float)
    s1, s2 = np.asarray(record.sup_1, float), np.asarray(record.sup_2, float)
    if not (len(t) == len(w) == len(s1) == len(s2)):
        raise ValueError("series lengths differ")
    if len(t) < 2:
        raise ValueError("need at least two samples")
    if c_hat < 0:
        raise ValueError("c_hat must be >= 0")
    sigma = params.sigma
    if sigma == 0:
        rate = np.full(len(t), -2.0 * params.lam)
    else:
        rate = -2.0 * params.lam + c_hat * (s1 ** (2 * sigma) + s2 ** (2 * sigma))
    rhs = 0.5 * (rate[1:] + rate[:-1])
    dt = np.diff(t)
    scale = np.sqrt(record.mass_1) + np.sqrt(record.mass_2)
    ok = w > floor * np.maximum(scale, 1e-300)
    checked = ok[1:] & ok[:-1]
    wmin = np.where(checked, np.minimum(w[1:], w[:-1]), 1.0)
    allowance = tolerance + roundoff * np.maximum(scale[1:], scale[:-1]) / (wmin * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = np.where(checked, 2.0 * np.log(np.where(checked, w[1:] / w[:-1], 1.0)) / dt, np.nan)
    margins = np.where(checked, rhs - lhs, np.nan)
    n = int(checked.sum())
    viol = checked & (margins < -allowance)
    frac = float(viol.sum() / n) if n else 0.0
    return CertificateReport(margins, lhs, rhs, checked, allowance, frac, n, tolerance)


# -- energy process and coupling index ---------------------------------------------------


def _en(phi, g0, g2, times, lam, cfg: CouplingConfig) -> np.ndarray:
    n = cfg.moment_index
    phin = np.asarray(phi, float) ** n
    integrand = cfg.c1n * phin + n * np.asarray(g0) ** (2 * n) + n * np.asarray(g2) ** (2 * n)
    return phin + lam * cumulative_trapezoid(integrand, times, initial=0.0, axis=-1)


def en_series(traj: TrajectoryRecord, cfg: CouplingConfig) -> np.ndarray:
    """Energy process ``Phi^n + lam int_0^t (c1n Phi^n + n|Gamma|^{2n} + n|Lap Gamma|^{2n}) ds``.

    The integral is the trapezoid rule over the record's sample times.
    """
    if traj.gamma_norm is None or traj.gamma_lap_norm is None:
        raise ValueError("trajectory was recorded without the stochastic convolution")
    if traj.params is None:
        raise ValueError("trajectory record carries no model parameters")
    return _en(traj.phi, traj.gamma_norm, traj.gamma_lap_norm, traj.times, traj.params.lam, cfg)


def pair_en_series(record: CouplingRecord, cfg: CouplingConfig) -> tuple[np.ndarray, np.ndarray]:
    if record.gamma_norm is None:
        raise ValueError("coupling record was produced without the stochastic convolution")
    lam = record.params.lam
    return (_en(record.phi_1, record.gamma_norm, record.gamma_lap_norm, record.times, lam, cfg),
            _en(record.phi_2, record.gamma_norm, record.gamma_lap_norm, record.times, lam, cfg))


def _block_indices(times: np.ndarray, block: float, k_max: Optional[int] = None) -> np.ndarray:
    n_blocks = int(math.floor(times[-1] / block + 1e-9)) if k_max is None else k_max
    targets = block * np.arange(n_blocks + 1)
    idx = np.searchsorted(times, targets - 1e-9 * max(1.0, block))
    idx = np.minimum(idx, len(times) - 1)
    if np.any(np.abs(times[idx] - targets) > 1e-9 * max(1.0, times[-1])):
        raise ValueError("block boundaries do not fall on sample times; dt must divide T")
    return idx


def ell_all(record: CouplingRecord, cfg: CouplingConfig, k_max: Optional[int] = None) -> np.ndarray:
    """``ell_{theta,beta}(k)`` for every ``k = 0..k_max`` (float array; ``inf`` when undefined).

    For each candidate ``l`` the first sample at or after ``lT`` where either
    member's energy leaves the envelope is located once; ``P_{l,k}`` holds iff
    the pair functional at ``lT`` is at most ``beta`` and that first exit lies
    beyond ``kT``.
    """
    if cfg.slope_constant is None:
        raise ValueError("coupling config has no slope constant; fit or supply one")
    times = np.asarray(record.times, float)
    if k_max is not None and k_max * cfg.block_length > times[-1] * (1 + 1e-9) + 1e-12:
        raise ValueError(f"k={k_max} needs horizon {k_max * cfg.block_length}, record ends at {times[-1]}")
    e1, e2 = record.en_series_1, record.en_series_2
    if e1 is None:
        e1, e2 = pair_en_series(record, cfg)
    bidx = _block_indices(times, cfg.block_length, k_max)
    nb = len(bidx)
    phi_pair = record.phi_pair_series
    level = cfg.theta + cfg.beta**cfg.moment_index
    first_exit = np.empty(nb, dtype=np.int64)
    emax = np.maximum(e1, e2)
    for l, i0 in enumerate(bidx):
        env = level + cfg.slope_constant * (times[i0:] - times[i0])
        bad = np.nonzero(emax[i0:] > env)[0]
        first_exit[l] = i0 + bad[0] if bad.size else len(times)
    start_ok = phi_pair[bidx] <= cfg.beta
    out = np.full(nb, np.inf)
    for k in range(nb):
        for l in range(k + 1):
            if start_ok[l] and first_exit[l] > bidx[k]:
                out[k] = l
                break
    return out


def ell_theta_beta(record: CouplingRecord, cfg: CouplingConfig, k: int):
    """Smallest block ``l <= k`` at which the pair is coupled up to ``kT``; ``math.inf`` if none."""
    if k < 0:
        raise ValueError("k must be >= 0")
    v = ell_all(record, cfg, k)[k]
    return math.inf if np.isinf(v) else int(v)


def check_ell_structure(ell: np.ndarray, phi_pair_at_blocks: np.ndarray, beta: float) -> list[str]:
    """Return violations of ``ell(k+1)=l<=k => ell(k)=l`` and ``ell(k)=k => pair sum <= beta``."""
    bad = []
    for k in range(len(ell) - 1):
        l = ell[k + 1]
        if np.isfinite(l) and l <= k and ell[k] != l:
            bad.append(f"ell({k + 1})={l:g} but ell({k})={ell[k]:g}")
    for k, l in enumerate(ell):
        if l == k and not phi_pair_at_blocks[k] <= beta:
            bad.append(f"ell({k})={k} but pair functional {phi_pair_at_blocks[k]:g} > beta")
    return bad


def fit_slope_constant(en: Sequence[np.ndarray] | np.ndarray, times: np.ndarray,
                       percentile: float = 99.0) -> float:
    """Percentile over paths of ``sup_t (E(t) - E(0)) / t``; floored at a tiny positive value."""
    en = np.atleast_2d(np.asarray(en, float))
    t = np.asarray(times, float)
    pos = t > 0
    if not np.any(pos):
        raise ValueError("need positive sample times")
    slopes = np.max((en[:, pos] - en[:, :1]) / t[pos], axis=1)
    k = float(np.percentile(slopes, percentile))
    return max(k, 1e-12)


# -- statistics ------------------------------------------------------------------------------


MIN_CELL = 30


@dataclass
class Proportion:
    successes: int
    trials: int
    estimate: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    status: str
    """``ok``, ``small-cell`` (fewer than 30 trials) or ``no-data``."""

    def as_dict(self) -> dict:
        return dict(successes=self.successes, trials=self.trials, estimate=self.estimate,
                    ci_low=self.ci_low, ci_high=self.ci_high, status=self.status)


def wilson(successes: int, trials: int, alpha: float = 0.05) -> Proportion:
    if trials == 0:
        return Proportion(0, 0, None, None, None, "no-data")
    lo, hi = proportion_confint(successes, trials, alpha=alpha, method="wilson")
    # the closed form leaves round-off at the boundary; pin it so "excludes 0" is exact
    if successes == 0:
        lo = 0.0
    if successes == trials:
        hi = 1.0
    status = "ok" if trials >= MIN_CELL else "small-cell"
    return Proportion(int(successes), int(trials), successes / trials, float(lo), float(hi), status)


def coupling_statistics(records: Sequence[CouplingRecord], cfg: CouplingConfig,
                        radius: Optional[float] = None, c0: Optional[float] = None,
                        q: Optional[float] = None) -> dict[str, Proportion]:
    """Empirical coupling probabilities with Wilson 95% intervals.

    Keys: ``recouple`` = P(ell(k+1)=k+1 | ell(k)=inf [, pair functional at kT <= radius]),
    ``decouple`` = P(ell(k+1) != l | ell(k)=l finite), ``decouple_from_0`` = the same
    with l = 0, and, when ``c0`` and ``q`` are given, ``tail`` =
    P(d1((k+1)T) >= c0 ((k+1)T - lT)^{-q}, ell(k) = l) pooled over finite l.
    """
    rec_s = rec_n = dec_s = dec_n = d0_s = d0_n = tail_s = tail_n = 0
    for r in records:
        ell = r.ell_outcomes if r.ell_outcomes is not None else ell_all(r, cfg)
        bidx = _block_indices(np.asarray(r.times), cfg.block_length, len(ell) - 1)
        pair = r.phi_pair_series[bidx]
        for k in range(len(ell) - 1):
            l = ell[k]
            if np.isinf(l):
                if radius is None or pair[k] <= radius:
                    rec_n += 1
                    rec_s += int(ell[k + 1] == k + 1)
            else:
                dec_n += 1
                dec_s += int(ell[k + 1] != l)
                if l == 0:
                    d0_n += 1
                    d0_s += int(ell[k + 1] != 0)
                if c0 is not None and q is not None:
                    t_end = r.times[bidx[k + 1]]
                    tail_n += 1
                    gap = t_end - l * cfg.block_length
                    tail_s += int(r.d1_series[bidx[k + 1]] >= c0 * gap ** (-q))
    out = {
        "recouple": wilson(rec_s, rec_n),
        "decouple": wilson(dec_s, dec_n),
        "decouple_from_0": wilson(d0_s, d0_n),
    }
    if c0 is not None and q is not None:
        out["tail"] = wilson(tail_s, tail_n)
    small = [k for k, v in out.items() if v.status == "small-cell"]
    if small:
        warnings.warn(f"conditioning cells with fewer than {MIN_CELL} trials: {small}", stacklevel=2)
    return out
