"""Equation coefficients, the nonlinearity and the Lyapunov functional."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .spectral import Field, gradient_norm, norm_sobolev


class RegimeWarning(UserWarning):
    """Parameters lie outside a regime covered by the theory."""


def sigma_d(sigma: float, dim: int) -> float:
    """Exponent ``1 + 2 sigma / (2 - sigma d)`` of the mass term in the focusing functional."""
    if sigma * dim >= 2:
        raise ValueError(f"sigma*d must be < 2, got sigma={sigma}, d={dim}")
    return 1.0 + 2.0 * sigma / (2.0 - sigma * dim)


def regime_violations(alpha: int, sigma: float, dim: int) -> tuple[list[str], list[str]]:
    """Return ``(errors, warnings)`` for the nonlinearity exponent.

    Errors are conditions the simulator cannot meaningfully run under.
    Warnings mark regimes where the well-posedness or mixing theory is silent.
    """
    errors: list[str] = []
    soft: list[str] = []
    if alpha not in (-1, 1):
        errors.append(f"alpha must be -1 or +1, got {alpha}")
        return errors, soft
    if sigma < 0:
        errors.append(f"sigma must be >= 0, got {sigma}")
        return errors, soft
    if sigma == 0:
        soft.append("sigma = 0 is the linear equation; the well-posedness theory needs sigma > 0")
    if alpha == 1 and sigma * dim >= 2:
        errors.append(
            f"focusing case needs 0 < sigma < 2/d = {2 / dim:g}, got sigma={sigma}"
        )
    if alpha == -1 and dim == 3 and sigma >= 2:
        errors.append(f"defocusing case with d=3 needs sigma < 2, got {sigma}")
    if dim == 3 and not sigma < 1.5:
        soft.append(f"unique ergodicity for d=3 needs sigma < 3/2, got {sigma}")
    if dim == 3 and not (1 / 6 < sigma < 1.5):
        soft.append(f"mixing for d=3 needs 1/6 < sigma < 3/2, got {sigma}")
    return errors, soft


@dataclass(frozen=True)
class ModelParams:
    """Damping ``lam``, sign ``alpha``, exponent ``sigma`` and focusing weight ``kappa``."""

    lam: float
    alpha: int
    sigma: float
    dim: int
    kappa: Optional[float] = None
    strict: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"damping lam must be >= 0, got {self.lam}")
        errors, soft = regime_violations(self.alpha, self.sigma, self.dim)
        if errors:
            raise ValueError("; ".join(errors))
        if soft:
            if self.strict:
                raise ValueError("; ".join(soft))
            for msg in soft:
                warnings.warn(msg, RegimeWarning, stacklevel=3)
        if self.kappa is not None and not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    @property
    def sigma_d(self) -> float:
        return sigma_d(self.sigma, self.dim)

    def with_kappa(self, kappa: float) -> "ModelParams":
        return ModelParams(self.lam, self.alpha, self.sigma, self.dim, kappa, self.strict)

    def with_lam(self, lam: float) -> "ModelParams":
        return ModelParams(lam, self.alpha, self.sigma, self.dim, self.kappa, self.strict)


@dataclass
class FunctionalReport:
    """Parts of the Lyapunov functional. Fields are floats or arrays over a batch/time."""

    phi: np.ndarray | float
    grad_sq: np.ndarray | float
    lp_pot: np.ndarray | float
    mass: np.ndarray | float
    timestamp: np.ndarray | float = 0.0


def modulus_power(values: np.ndarray, power: float) -> np.ndarray:
    """``|u|^power`` with ``0^power = 0`` for power > 0 and ``0^0 = 1``."""
    mod = np.abs(values)
    if power == 0:
        return np.ones_like(mod)
    return mod**power


def nonlinearity(u: Field, params: ModelParams) -> Field:
    """``F_alpha(u) = -i alpha |u|^{2 sigma} u`` pointwise."""
    if u.representation != "physical":
        raise ValueError("nonlinearity expects a physical-representation field")
    v = u.values
    return Field(u.grid, -1j * params.alpha * modulus_power(v, 2 * params.sigma) * v)


def potential_term(u: Field, sigma: float):
    """``||u||_{L^{2+2 sigma}}^{2+2 sigma}`` by grid quadrature."""
    v = u.physical().values
    s = (np.abs(v) ** (2 + 2 * sigma)).sum(axis=u.grid.axes) * u.grid.cell_volume
    return float(s) if np.ndim(s) == 0 else s


def functional_parts(u: Field, sigma: float):
    grad_sq = gradient_norm(u) ** 2
    mass = norm_sobolev(u, 0) ** 2
    return grad_sq, potential_term(u, sigma), mass


def combine_phi(alpha: int, sigma: float, dim: int, kappa, grad_sq, lp_pot, mass):
    if alpha == -1:
        return grad_sq + lp_pot / (1 + sigma) + mass
    if alpha == 1:
        if kappa is None:
            raise ValueError("focusing functional needs kappa; use choose_kappa")
        return grad_sq - lp_pot / (1 + sigma) + kappa * np.asarray(mass) ** sigma_d(sigma, dim)
    raise ValueError(f"alpha must be -1 or +1, got {alpha}")


def phi_alpha(u: Field, params: ModelParams, t: float = 0.0) -> FunctionalReport:
    grad_sq, lp_pot, mass = functional_parts(u, params.sigma)
    phi = combine_phi(params.alpha, params.sigma, params.dim, params.kappa, grad_sq, lp_pot, mass)
    if np.ndim(phi) == 0:
        phi = float(phi)
    return FunctionalReport(phi, grad_sq, lp_pot, mass, t)


def hamiltonian(u: Field, params: ModelParams):
    """``||grad u||^2 - alpha ||u||^{2+2s}_{L^{2+2s}} / (1+s)``, conserved by the undamped noiseless flow."""
    grad_sq, lp_pot, _ = functional_parts(u, params.sigma)
    return grad_sq - params.alpha * lp_pot / (1 + params.sigma)


def _as_members(ensemble) -> list[Field]:
    if isinstance(ensemble, Field):
        if not ensemble.batch_shape:
            return [ensemble]
        flat = ensemble.values.reshape((-1,) + ensemble.grid.shape)
        return [Field(ensemble.grid, v, ensemble.representation) for v in flat]
    return list(ensemble)


def kappa_requirements(sigma: float, dim: int, ensemble) -> np.ndarray:
    """Per-member smallest kappa with ``100 P <= G/2 + kappa M^{sigma_d} / 2``."""
    sd = sigma_d(sigma, dim)
    out = []
    for u in _as_members(ensemble):
        grad_sq, lp_pot, mass = functional_parts(u, sigma)
        if mass == 0:
            out.append(np.nan)
            continue
        out.append(max(0.0, (200.0 * lp_pot - grad_sq) / mass**sd))
    return np.asarray(out)


def choose_kappa(sigma: float, dim: int, trial_ensemble, safety: float = 2.0) -> float:
    """Fit the focusing mass weight on a trial ensemble, times a safety factor."""
    req = kappa_requirements(sigma, dim, trial_ensemble)
    if req.size == 0 or np.all(np.isnan(req)):
        raise ValueError("trial ensemble is empty or all-zero")
    k = safety * float(np.nanmax(req))
    return k if k > 0 else np.finfo(float).tiny


def phi_sandwich_constants(ensemble, params: ModelParams) -> tuple[float, float]:
    """Fitted ``(c_Phi, C_Phi)`` for the two-sided focusing bound over the ensemble."""
    sd = params.sigma_d
    lo, hi = np.inf, 0.0
    for u in _as_members(ensemble):
        grad_sq, lp_pot, mass = functional_parts(u, params.sigma)
        if mass == 0:
            continue
        phi = combine_phi(1, params.sigma, params.dim, params.kappa, grad_sq, lp_pot, mass)
        lo = min(lo, phi / (grad_sq + lp_pot + mass**sd))
        hi = max(hi, phi / (grad_sq + mass**sd))
    return float(lo), float(hi)


def d1_distance(u: Field, v: Field):
    """``min(||u - v||_H, 1)``."""
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    diff = Field(u.grid, u.physical().values - v.physical().values)
    return np.minimum(norm_sobolev(diff, 0), 1.0)


def random_smooth_fields(grid, n: int, rng: np.random.Generator, amplitude_range=(0.05, 2.0),
                         width_range=(0.5, 3.0)) -> Field:
    """Batch of localized complex bumps with random centre, width, phase and carrier."""
    L = grid.box_length
    coords = grid.coordinates
    out = np.empty((n,) + grid.shape, complex)
    for i in range(n):
        amp = math.exp(rng.uniform(*np.log(amplitude_range)))
        width = rng.uniform(*width_range)
        centre = rng.uniform(0, L, grid.dim)
        carrier = 2 * np.pi * rng.integers(-3, 4, grid.dim) / L
        r2 = 0.0
        phase = rng.uniform(0, 2 * np.pi)
        for x, c, kc in zip(coords, centre, carrier):
            dx = (x - c + L / 2) % L - L / 2
            r2 = r2 + dx**2
            phase = phase + kc * x
        out[i] = amp * np.exp(-r2 / (2 * width**2)) * np.exp(1j * phase)
    return Field(grid, out)


def default_trial_ensemble(grid, n: int = 128, seed: int = 0) -> Field:
    return random_smooth_fields(grid, n, np.random.default_rng(seed))


def as_members(ensemble: Iterable[Field] | Field) -> list[Field]:
    return _as_members(ensemble)
