"""Periodic-box discretization, spectral transforms and norms.

The box ``[0, L)^d`` stands in for the whole space. Spectral values of a
:class:`Field` are the coefficients of ``u`` in the orthonormal Fourier basis
``e_k(x) = exp(i k.x) / sqrt(L^d)`` of L^2(box), so that

    ||u||_H^2 = sum_k |c_k|^2 = sum_j |u_j|^2 * cell_volume

holds with no normalization constants. The coefficients are grid independent,
which is what makes spectral zero-padding (upsampling) a pure copy.

Fields may carry leading batch axes; the grid always occupies the trailing
``dim`` axes and every norm reduces over those axes only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

Representation = Literal["physical", "spectral"]


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[0, box_length)^dim``.

    Per-axis wavenumbers are stored in FFT order
    (``0, 1, ..., n/2-1, -n/2, ..., -1`` times ``2 pi / L``). The single
    unmatched Nyquist mode ``-n/2`` is kept by the transforms; the noise
    operator never excites it (see :mod:`snls.noise`).
    """

    dim: int
    n_per_dim: int
    box_length: float

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if int(self.n_per_dim) != self.n_per_dim or self.n_per_dim < 4 or self.n_per_dim % 2:
            raise ValueError(f"n_per_dim must be an even integer >= 4, got {self.n_per_dim}")
        if not self.box_length > 0:
            raise ValueError(f"box_length must be positive, got {self.box_length}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_dim,) * self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    @property
    def size(self) -> int:
        return self.n_per_dim**self.dim

    @property
    def spacing(self) -> float:
        return self.box_length / self.n_per_dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def volume(self) -> float:
        return self.box_length**self.dim

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """1-D wavenumber table ``2 pi m / L`` in FFT order (same for every axis)."""
        m = np.fft.fftfreq(self.n_per_dim, d=1.0 / self.n_per_dim)
        return 2.0 * np.pi * m / self.box_length

    @cached_property
    def coordinates(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.n_per_dim) * self.spacing
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    @cached_property
    def k_vectors(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.wavenumbers] * self.dim), indexing="ij"))

    @cached_property
    def k_squared(self) -> np.ndarray:
        return sum(kj**2 for kj in self.k_vectors)

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on every mode whose index along some axis is the Nyquist index n/2."""
        idx = np.zeros(self.n_per_dim, dtype=bool)
        idx[self.n_per_dim // 2] = True
        grids = np.meshgrid(*([idx] * self.dim), indexing="ij")
        return np.logical_or.reduce(grids)

    def refined(self, factor: float) -> "Grid":
        """Same box with ``n`` scaled by ``factor`` (rounded up to an even integer)."""
        n = int(np.ceil(self.n_per_dim * factor))
        n += n % 2
        return Grid(self.dim, max(n, self.n_per_dim), self.box_length)


def make_grid(dim: int, n_per_dim: int, box_length: float) -> Grid:
    return Grid(int(dim), int(n_per_dim), float(box_length))


@dataclass
class Field:
    """Complex field on a :class:`Grid`, in physical or spectral form."""

    grid: Grid
    values: np.ndarray
    representation: Representation = "physical"
    batch_shape: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.representation not in ("physical", "spectral"):
            raise ValueError(f"unknown representation {self.representation!r}")
        gshape = self.grid.shape
        if self.values.shape[self.values.ndim - len(gshape):] != gshape:
            raise ValueError(
                f"values shape {self.values.shape} does not end with grid shape {gshape}"
            )
        self.batch_shape = self.values.shape[: self.values.ndim - len(gshape)]

    @classmethod
    def from_function(cls, grid: Grid, func) -> "Field":
        return cls(grid, func(*grid.coordinates), "physical")

    @classmethod
    def zeros(cls, grid: Grid, batch_shape: tuple[int, ...] = (), representation="physical"):
        return cls(grid, np.zeros(batch_shape + grid.shape, complex), representation)

    def physical(self) -> "Field":
        return self if self.representation == "physical" else to_physical(self)

    def spectral(self) -> "Field":
        return self if self.representation == "spectral" else to_spectral(self)

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy(), self.representation)

    def __getitem__(self, index) -> "Field":
        """Index into the batch axes."""
        if not self.batch_shape:
            raise IndexError("field has no batch axes")
        return Field(self.grid, self.values[index], self.representation)


# -- raw array kernels -------------------------------------------------------
# These operate on arrays whose trailing axes are the grid axes.


def forward(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.fft.fftn(values, axes=grid.axes, norm="ortho") * np.sqrt(grid.cell_volume)


def inverse(coeffs: np.ndarray, grid: Grid) -> np.ndarray:
    return np.fft.ifftn(coeffs, axes=grid.axes, norm="ortho") / np.sqrt(grid.cell_volume)


def to_spectral(u: Field) -> Field:
    if u.representation != "physical":
        raise ValueError("to_spectral expects a physical-representation field")
    return Field(u.grid, forward(u.values, u.grid), "spectral")


def to_physical(u: Field) -> Field:
    if u.representation != "spectral":
        raise ValueError("to_physical expects a spectral-representation field")
    return Field(u.grid, inverse(u.values, u.grid), "physical")


def _axis_index_map(n_coarse: int, n_fine: int) -> np.ndarray:
    """Positions of the coarse FFT-ordered modes inside a fine FFT-ordered axis."""
    m = np.fft.fftfreq(n_coarse, d=1.0 / n_coarse).astype(int)
    return np.mod(m, n_fine)


def pad_coefficients(coeffs: np.ndarray, grid: Grid, fine: Grid) -> np.ndarray:
    """Embed coarse coefficients into the fine mode set (zero elsewhere).

    The coarse Nyquist coefficient is split evenly between ``+n/2`` and
    ``-n/2`` so that :func:`truncate_coefficients` inverts this exactly.
    """
    if fine.n_per_dim == grid.n_per_dim:
        return coeffs.copy()
    n, nf = grid.n_per_dim, fine.n_per_dim
    out = coeffs
    batch_nd = coeffs.ndim - grid.dim
    for ax in range(grid.dim):
        axis = batch_nd + ax
        shape = list(out.shape)
        shape[axis] = nf
        new = np.zeros(shape, dtype=complex)
        src = np.moveaxis(out, axis, -1)
        dst = np.moveaxis(new, axis, -1)
        pos = _axis_index_map(n, nf)
        dst[..., pos] = src
        nyq = src[..., n // 2]
        dst[..., nf - n // 2] = 0.5 * nyq
        dst[..., n // 2] = 0.5 * nyq
        out = new
    return out


def truncate_coefficients(coeffs: np.ndarray, fine: Grid, grid: Grid) -> np.ndarray:
    if fine.n_per_dim == grid.n_per_dim:
        return coeffs.copy()
    n, nf = grid.n_per_dim, fine.n_per_dim
    out = coeffs
    batch_nd = coeffs.ndim - grid.dim
    for ax in range(grid.dim):
        axis = batch_nd + ax
        src = np.moveaxis(out, axis, -1)
        pos = _axis_index_map(n, nf)
        new = src[..., pos].copy()
        new[..., n // 2] = src[..., nf - n // 2] + src[..., n // 2]
        out = np.moveaxis(new, -1, axis)
    return out


def _check_finite(values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains NaN or infinite values")


def _sum_grid(a: np.ndarray, grid: Grid):
    s = a.sum(axis=grid.axes)
    return float(s) if np.ndim(s) == 0 else s


def norm_sobolev(u: Field, s: float):
    """``(sum_k (1+|k|^2)^s |c_k|^2)^{1/2}``, the discrete H^s norm."""
    c = u.spectral().values
    _check_finite(c)
    weight = (1.0 + u.grid.k_squared) ** s
    return np.sqrt(_sum_grid(weight * np.abs(c) ** 2, u.grid))


def _lp_of_values(values: np.ndarray, grid: Grid, p: float):
    if p < 1:
        raise ValueError(f"p must be in [1, inf], got {p}")
    mod = np.abs(values)
    if np.isinf(p):
        m = mod.max(axis=grid.axes)
        return float(m) if np.ndim(m) == 0 else m
    return _sum_grid(mod**p, grid) ** (1.0 / p) * grid.cell_volume ** (1.0 / p)


def sup_norm(u: Field, upsample: int = 1):
    """Grid maximum of ``|u|``, optionally on a spectrally refined grid (factor 1..4)."""
    if not 1 <= upsample <= 4:
        raise ValueError(f"upsample factor must be in [1, 4], got {upsample}")
    if upsample == 1:
        return _lp_of_values(u.physical().values, u.grid, np.inf)
    fine = u.grid.refined(upsample)
    vals = inverse(pad_coefficients(u.spectral().values, u.grid, fine), fine)
    return _lp_of_values(vals, fine, np.inf)


def norm_lp(u: Field, p: float):
    """Grid quadrature of the L^p norm; ``p = inf`` gives the grid max modulus."""
    if u.representation != "physical":
        raise ValueError("norm_lp expects a physical-representation field")
    _check_finite(u.values)
    return _lp_of_values(u.values, u.grid, p)


def bessel_potential(u: Field, s: float) -> Field:
    """Physical field ``F^{-1}[(1+|k|^2)^{s/2} F u]``."""
    c = u.spectral().values
    return Field(u.grid, inverse((1.0 + u.grid.k_squared) ** (s / 2) * c, u.grid))


def norm_hsp(u: Field, s: float, p: float):
    """Bessel-potential norm: multiplier first, then L^p quadrature."""
    if p < 1:
        raise ValueError(f"p must be in [1, inf], got {p}")
    if s == 0:
        return norm_lp(u.physical(), p)
    return norm_lp(bessel_potential(u, s), p)


def gradient_norm(u: Field):
    """``||grad u||_H`` computed spectrally."""
    c = u.spectral().values
    return np.sqrt(_sum_grid(u.grid.k_squared * np.abs(c) ** 2, u.grid))


def laplacian_norm(u: Field):
    c = u.spectral().values
    return np.sqrt(_sum_grid(u.grid.k_squared**2 * np.abs(c) ** 2, u.grid))


def inner(u: Field, v: Field):
    """Real inner product ``Re int u conj(v) dx``."""
    a, b = u.spectral().values, v.spectral().values
    return _sum_grid((a * np.conj(b)).real, u.grid)
