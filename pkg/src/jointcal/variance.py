"""Variance-swap rates, squared VIX and model-free replication.

Closed forms for the SJD and Bates models, the log-contract multiplier
Q = 2 VS / VIX^2, and the discrete strike-sum replication of VIX^2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .types import BatesParams, SjdParams


class NonPhysicalVixError(ValueError):
    """Closed-form VIX^2 came out negative."""


class ReplicationWarning(RuntimeWarning):
    """Replication grid has no strikes on one side of the forward."""


@dataclass(frozen=True)
class StrikeGrid:
    """OTM option prices on a strike grid: puts below the forward, calls at or above.

    ``discount_factor`` is e^{-r tau}; replicated prices are forward-valued by
    dividing by it.  The default of 1 gives the plain strike sum.
    """

    strikes: tuple[float, ...]
    otm_prices: tuple[float, ...]
    forward: float
    discount_factor: float = 1.0

    def __post_init__(self):
        k = tuple(float(x) for x in self.strikes)
        p = tuple(float(x) for x in self.otm_prices)
        if len(k) != len(p):
            raise ValueError("strikes and otm_prices differ in length")
        if len(k) < 2:
            raise ValueError(f"a strike grid needs at least 2 strikes, got {len(k)}")
        if any(b == a for a, b in zip(k, k[1:])):
            raise ValueError("duplicate strikes in grid")
        if any(b < a for a, b in zip(k, k[1:])):
            raise ValueError("strikes must be strictly increasing")
        if k[0] <= 0:
            raise ValueError("strikes must be > 0")
        if any(not math.isfinite(x) or x < 0 for x in p):
            raise ValueError("OTM prices must be finite and >= 0")
        if not self.forward > 0 or not 0 < self.discount_factor <= math.inf:
            raise ValueError("forward and discount_factor must be > 0")
        object.__setattr__(self, "strikes", k)
        object.__setattr__(self, "otm_prices", p)
        object.__setattr__(self, "forward", float(self.forward))
        object.__setattr__(self, "discount_factor", float(self.discount_factor))


def strike_weights(grid: StrikeGrid) -> np.ndarray:
    """Widths Delta(K_j): one-sided at the ends, centered in the interior."""
    k = np.asarray(grid.strikes)
    w = np.empty_like(k)
    w[0] = k[1] - k[0]
    w[-1] = k[-1] - k[-2]
    w[1:-1] = 0.5 * (k[2:] - k[:-2])
    return w


def replicate_vix_squared(grid: StrikeGrid, maturity: float) -> float:
    """(2/tau) * sum_j Delta(K_j) Q(K_j) / K_j^2 over OTM prices Q."""
    if not maturity > 0:
        raise ValueError(f"maturity must be > 0, got {maturity}")
    k = np.asarray(grid.strikes)
    below = k < grid.forward
    if below.all() or not below.any():
        side = "calls" if below.all() else "puts"
        warnings.warn(f"no {side} in replication grid; VIX^2 biased low", ReplicationWarning, stacklevel=2)
    prices = np.asarray(grid.otm_prices) / grid.discount_factor
    return float(2.0 / maturity * np.sum(strike_weights(grid) * prices / (k * k)))


# ---------------------------------------------------------------------------
# SJD closed forms
# ---------------------------------------------------------------------------


def sjd_variance_swap(params: SjdParams) -> float:
    return params.sigma**2 + params.lam * params.jump**2


def sjd_vix_squared(params: SjdParams) -> float:
    # 1 + J - e^J, evaluated without cancellation
    gap = params.jump - math.expm1(params.jump)
    return params.sigma**2 - 2.0 * params.lam * gap


# ---------------------------------------------------------------------------
# Bates closed forms
# ---------------------------------------------------------------------------


def _check_maturity(maturity):
    maturity = np.asarray(maturity, float)
    if np.any(~(maturity > 0)):
        raise ValueError("maturity must be > 0")
    return maturity


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def bates_jump_variance(params: BatesParams) -> float:
    """lambda * E[J^2]: jump contribution to annualized quadratic variation."""
    m = params.jump_mean
    return params.lam * (m * m + params.sigma_j**2)


def bates_jump_gap(params: BatesParams) -> float:
    """2 lambda E[1 + J + J^2/2 - e^J], the VS - VIX^2 spread (maturity free)."""
    m = params.jump_mean
    return 2.0 * params.lam * (math.log1p(params.mu_j) - params.mu_j + 0.5 * m * m)


def bates_diffusive_variance(params: BatesParams, maturity):
    """Annualized expected integrated variance of the Heston leg."""
    tau = _check_maturity(maturity)
    x = params.kappa * tau
    # (1 - e^{-x}) / x, stable as x -> 0
    ratio = np.where(x < 1e-8, 1.0 - 0.5 * x, -np.expm1(-x) / np.where(x < 1e-8, 1.0, x))
    return _out(params.theta + (params.v0 - params.theta) * ratio)


def bates_variance_swap(params: BatesParams, maturity):
    return _out(bates_diffusive_variance(params, maturity) + bates_jump_variance(params))


def bates_vix_squared(params: BatesParams, maturity):
    """Model VIX^2; raises ``NonPhysicalVixError`` if negative."""
    vix2 = np.asarray(bates_variance_swap(params, maturity)) - bates_jump_gap(params)
    if np.any(vix2 < 0):
        raise NonPhysicalVixError(f"non-physical VIX: model VIX^2 = {np.min(vix2):.3g} < 0 for {params}")
    return _out(vix2)


def vs_vix_spread(params: BatesParams, maturity):
    return _out(np.asarray(bates_variance_swap(params, maturity)) - np.asarray(bates_vix_squared(params, maturity)))


def log_contract_multiplier(params: BatesParams, maturity):
    """Q with Q * VIX^2 / 2 = VS; exactly 2 without jumps."""
    vs = np.asarray(bates_variance_swap(params, maturity))
    if params.lam == 0:
        return _out(np.full(vs.shape, 2.0))
    vix2 = np.asarray(bates_vix_squared(params, maturity))
    if np.any(vix2 <= 0):
        raise NonPhysicalVixError("multiplier undefined: model VIX^2 <= 0")
    return _out(2.0 * vs / vix2)
