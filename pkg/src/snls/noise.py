"""Covariance operator, Wiener increments and the stochastic convolution.

``Q`` is diagonal in the Fourier basis: ``Q e_k = q_k e_k`` with the power-law
symbol ``q_k = A (1 + |k|^2)^{-r/2}``. Increments are drawn from a counter-based
generator keyed by ``(seed, step counter)``; the row belonging to a trajectory is
fixed by its id, so a trajectory's noise never depends on which other
trajectories are simulated alongside it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Literal, Optional

import numpy as np

from .spectral import Field, Grid

NoiseKind = Literal["circular", "real"]

# trajectories per Philox sub-stream; part of the reproducibility contract
_BLOCK = 8


@dataclass(frozen=True)
class CovarianceSpec:
    amplitude: float
    decay: float
    mode_cutoff: Optional[float] = None
    kind: NoiseKind = "circular"
    symbol: Optional[Callable[[np.ndarray], np.ndarray]] = None
    """Optional override ``|k| -> q_k``; replaces the power law when given."""

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.symbol is None and not self.decay > 0:
            raise ValueError(f"decay must be > 0, got {self.decay}")
        if self.kind not in ("circular", "real"):
            raise ValueError(f"noise kind must be 'circular' or 'real', got {self.kind!r}")

    @classmethod
    def zero(cls) -> "CovarianceSpec":
        return cls(0.0, 1.0)

    @property
    def is_zero(self) -> bool:
        return self.amplitude == 0 and self.symbol is None

    def coefficients(self, grid: Grid) -> np.ndarray:
        """``q_k`` on the grid's modes, FFT ordered; Nyquist modes are zero."""
        kabs = np.sqrt(grid.k_squared)
        if self.symbol is not None:
            q = np.asarray(self.symbol(kabs), dtype=float) * np.ones_like(kabs)
        else:
            q = self.amplitude * (1.0 + kabs**2) ** (-self.decay / 2)
        if self.mode_cutoff is not None:
            q = np.where(kabs <= self.mode_cutoff + 1e-12, q, 0.0)
        return np.where(grid.nyquist_mask, 0.0, q)

    def regularity_warnings(self, dim: int, mixing: bool = False) -> list[str]:
        if self.symbol is not None or self.mode_cutoff is not None:
            return []
        out = []
        if not self.decay > 1 + dim / 2:
            out.append(f"decay r={self.decay} <= 1 + d/2: Q is not Hilbert-Schmidt into H^1 on R^d")
        if mixing and not self.decay > 3 + dim / 2:
            out.append(f"decay r={self.decay} <= 3 + d/2: Q is not Hilbert-Schmidt into H^3 on R^d")
        return out

    def with_amplitude(self, amplitude: float) -> "CovarianceSpec":
        return replace(self, amplitude=amplitude)


def hs_norm(Q: CovarianceSpec, s: float, grid: Grid) -> float:
    """``||Q||_{HS(U; H^s)} = (sum_k (1+|k|^2)^s q_k^2)^{1/2}`` over the grid's modes."""
    q = Q.coefficients(grid)
    return float(np.sqrt(np.sum((1.0 + grid.k_squared) ** s * q**2)))


@dataclass(frozen=True)
class NoiseStream:
    """Reproducible source of increments for one trajectory."""

    seed: int
    trajectory_id: int = 0
    counter: int = 0

    def at(self, counter: int) -> "NoiseStream":
        return replace(self, counter=counter)

    def next(self) -> "NoiseStream":
        return replace(self, counter=self.counter + 1)


def standard_complex(seed: int, ids, counter: int, mode_shape: tuple[int, ...]) -> np.ndarray:
    """Unit circular complex Gaussians, one array per trajectory id.

    Returns shape ``(len(ids),) + mode_shape`` with ``E|z|^2 = 1``. The values for
    trajectory ``j`` depend only on ``(seed, counter, j, mode_shape)``.
    """
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if np.any(ids < 0):
        raise ValueError("trajectory ids must be non-negative")
    n = int(np.prod(mode_shape))
    out = np.empty((ids.size, n), complex)
    key = [int(seed) % 2**64, int(counter) % 2**64]
    blocks = ids // _BLOCK
    for b in np.unique(blocks):
        sel = np.nonzero(blocks == b)[0]
        rows = ids[sel] % _BLOCK
        gen = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(b), 0]))
        g = gen.standard_normal((int(rows.max()) + 1, 2 * n))
        out[sel] = (g[rows, :n] + 1j * g[rows, n:]) / math.sqrt(2.0)
    return out.reshape((ids.size,) + tuple(mode_shape))


def _hermitian(z: np.ndarray, grid: Grid) -> np.ndarray:
    """Project onto coefficient sets of real-valued fields, preserving ``E|z_k|^2``."""
    flipped = z
    for ax in grid.axes:
        flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
    return (z + np.conj(flipped)) / math.sqrt(2.0)


def unit_noise(Q: CovarianceSpec, grid: Grid, seed: int, ids, counter: int) -> np.ndarray:
    """Per-mode unit-variance draws shaped ``(len(ids),) + grid.shape``."""
    z = standard_complex(seed, ids, counter, grid.shape)
    if Q.kind == "real":
        z = _hermitian(z, grid)
    return z


def sample_increment(Q: CovarianceSpec, grid: Grid, dt: float, stream: NoiseStream) -> Field:
    """Wiener increment ``Q dW`` over ``dt`` in spectral form: ``E|eta_k|^2 = q_k^2 dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    q = Q.coefficients(grid)
    z = unit_noise(Q, grid, stream.seed, [stream.trajectory_id], stream.counter)[0]
    return Field(grid, q * math.sqrt(dt) * z, "spectral")


def ou_variance(q: np.ndarray, lam: float, dt: float) -> np.ndarray:
    """Exact variance of the per-mode stochastic convolution increment over ``dt``."""
    if lam > 0:
        return q**2 * (-math.expm1(-2.0 * lam * dt)) / (2.0 * lam)
    return q**2 * dt


def propagator(grid: Grid, lam: float, dt: float) -> np.ndarray:
    """Per-mode factor ``exp((i |k|^2 - lam) dt)`` of the damped free flow."""
    return np.exp((1j * grid.k_squared - lam) * dt)


def ou_increment(Q: CovarianceSpec, grid: Grid, lam: float, dt: float, seed: int, ids,
                 counter: int) -> np.ndarray:
    std = np.sqrt(ou_variance(Q.coefficients(grid), lam, dt))
    return std * unit_noise(Q, grid, seed, ids, counter)


def gamma_exact_step(gamma: Field, Q: CovarianceSpec, lam: float, dt: float,
                     stream: NoiseStream) -> Field:
    """Advance the stochastic convolution by ``dt`` with the exact per-mode update."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    g = gamma.spectral()
    out = propagator(g.grid, lam, dt) * g.values
    if not Q.is_zero:
        out = out + ou_increment(Q, g.grid, lam, dt, stream.seed, [stream.trajectory_id],
                                 stream.counter)[0]
    return Field(g.grid, out, "spectral")


def check_regularity(Q: CovarianceSpec, dim: int, mixing: bool = False):
    for msg in Q.regularity_warnings(dim, mixing):
        warnings.warn(msg, stacklevel=2)
