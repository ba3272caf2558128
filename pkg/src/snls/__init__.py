"""Pseudospectral simulator and Monte-Carlo laboratory for the damped stochastic NLS.

    du = -i Lap u dt - i alpha |u|^{2 sigma} u dt - lam u dt + Q dW

on a large periodic box standing in for R^d.
"""

__version__ = "0.1.0"

from .spectral import Field, Grid, make_grid, norm_hsp, norm_lp, norm_sobolev, sup_norm  # noqa: E402
from .model import ModelParams, RegimeWarning, choose_kappa, d1_distance, phi_alpha, sigma_d  # noqa: E402
from .noise import CovarianceSpec, NoiseStream, hs_norm, sample_increment  # noqa: E402
from .integrator import BlowUpError, StepConfig, TrajectoryRecord, integrate, strang_step  # noqa: E402

__all__ = [
    "Field", "Grid", "make_grid", "norm_hsp", "norm_lp", "norm_sobolev", "sup_norm",
    "ModelParams", "RegimeWarning", "choose_kappa", "d1_distance", "phi_alpha", "sigma_d",
    "CovarianceSpec", "NoiseStream", "hs_norm", "sample_increment",
    "BlowUpError", "StepConfig", "TrajectoryRecord", "integrate", "strang_step",
]
