"""Bates calibration against the joint objective, plus the SJD line searches.

The search runs in an unconstrained coordinate system (``ParamTransform``).
Two local optimizers are available: scipy's bounded Nelder-Mead with restarts
from the best vertex, and a trust-region least-squares solve on the residual
vector whose squared norm is the objective.  ``hybrid`` runs least squares
and then polishes with Nelder-Mead.  Every evaluation updates a best-so-far
record, so the returned objective never increases with the evaluation budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import least_squares, minimize, minimize_scalar

from .objective import SurfaceObjective
from .pricing import PricerSettings, implied_vols, sjd_price
from .types import (
    BATES_FIELDS,
    BatesParams,
    CalibrationConfig,
    CalibrationResult,
    ParamBounds,
    SjdParams,
    VarianceTermStructure,
    VolSurface,
)
from .variance import NonPhysicalVixError

_RHO = BATES_FIELDS.index("rho")
_MU = BATES_FIELDS.index("mu_j")
_LOG = [i for i in range(8) if i not in (_RHO, _MU)]


class CalibrationError(RuntimeError):
    pass


class NoJumpVarianceError(ValueError):
    """Target variance leaves nothing for the jump component."""


class InconsistentVixError(ValueError):
    """Target VIX^2 cannot be met with a nonnegative intensity."""


@dataclass(frozen=True)
class ParamTransform:
    """Bijection between the parameter box and R^8.

    log for the positive parameters, a scaled logit for rho on (-1, 1) and
    log(1 + mu_j) for mu_j.  Bounds become a box in the search space.
    """

    bounds: ParamBounds

    def to_search(self, params: BatesParams) -> np.ndarray:
        x = params.to_array()
        z = np.empty(8)
        z[_LOG] = np.log(x[_LOG])
        # rho = +-1 maps to a large finite value so the search box stays finite
        r = min(max(x[_RHO], -1.0 + 1e-12), 1.0 - 1e-12)
        z[_RHO] = math.log1p(r) - math.log1p(-r)
        z[_MU] = math.log1p(x[_MU])
        return z

    def from_search(self, z) -> BatesParams:
        z = np.asarray(z, float)
        x = np.empty(8)
        x[_LOG] = np.exp(z[_LOG])
        x[_RHO] = math.tanh(0.5 * z[_RHO])
        x[_MU] = math.expm1(z[_MU])
        # keep round-off from pushing a parameter over a bound
        x = np.clip(x, self.bounds.lower.to_array(), self.bounds.upper.to_array())
        return BatesParams.from_array(x)

    def search_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.to_search(self.bounds.lower), self.to_search(self.bounds.upper)


class _Tracker:
    """Counts evaluations and remembers the best point seen."""

    def __init__(self, objective: SurfaceObjective, transform: ParamTransform, budget: int):
        self.objective = objective
        self.transform = transform
        self.budget = budget
        self.evaluations = 0
        self.best_value = math.inf
        self.best_z: np.ndarray | None = None
        self.n_resid = None

    @property
    def exhausted(self) -> bool:
        return self.evaluations >= self.budget

    def residuals(self, z) -> np.ndarray:
        self.evaluations += 1
        try:
            r = self.objective.residuals(self.transform.from_search(z))
        except (ValueError, NonPhysicalVixError):
            r = None
        if r is None or not np.all(np.isfinite(r)):
            # infeasible point: a large finite residual keeps the solvers moving
            r = np.full(self.n_resid or 1, 1e3)
            value = math.inf
        else:
            self.n_resid = r.size
            value = float(r @ r)
        if value < self.best_value:
            self.best_value = value
            self.best_z = np.array(z, float)
        return r

    def value(self, z) -> float:
        r = self.residuals(z)
        return float(r @ r)


class _BudgetExhausted(Exception):
    pass


def _nelder_mead(tracker: _Tracker, z0, lo, hi, opts) -> bool:
    """Bounded Nelder-Mead restarted from the best vertex; True when it converged."""
    converged = False
    z = np.clip(z0, lo, hi)
    for attempt in range(opts.restarts + 1):
        remaining = tracker.budget - tracker.evaluations
        if remaining <= 0:
            break
        step = 0.1 * 0.5**attempt
        simplex = _initial_simplex(z, lo, hi, step)
        f_start = tracker.best_value
        res = minimize(
            tracker.value,
            z,
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={
                "maxfev": remaining,
                "xatol": opts.xtol,
                "fatol": opts.tolerance * max(f_start, 1e-300) if math.isfinite(f_start) else opts.tolerance,
                "adaptive": True,
                "initial_simplex": simplex,
            },
        )
        z = tracker.best_z if tracker.best_z is not None else res.x
        converged = bool(res.success)
        # a restart that barely moves the objective means we are done
        if converged and math.isfinite(f_start) and f_start - tracker.best_value <= opts.tolerance * max(f_start, 1e-300):
            break
    return converged


def _initial_simplex(z, lo, hi, step) -> np.ndarray:
    n = z.size
    simplex = np.tile(z, (n + 1, 1))
    for i in range(n):
        h = step * max(1.0, abs(z[i]))
        # step inward when the vertex would leave the box
        simplex[i + 1, i] = z[i] + h if z[i] + h <= hi[i] else z[i] - h
    return np.clip(simplex, lo, hi)


def _least_squares(tracker: _Tracker, z0, lo, hi, opts) -> bool:
    """Trust-region least squares, rerun from the best point while it keeps improving."""
    converged = False
    z = z0
    for _ in range(opts.restarts + 1):
        remaining = tracker.budget - tracker.evaluations
        if remaining <= 0:
            break
        f_start = tracker.best_value
        converged = _least_squares_once(tracker, z, lo, hi, opts, remaining)
        z = tracker.best_z
        if not f_start - tracker.best_value > opts.tolerance * f_start:
            break
    return converged


def _least_squares_once(tracker: _Tracker, z0, lo, hi, opts, budget) -> bool:
    # least_squares wants a strictly feasible start
    z0 = np.clip(z0, lo + 1e-10 * (hi - lo), hi - 1e-10 * (hi - lo))

    def fun(z):
        if tracker.exhausted:
            raise _BudgetExhausted
        return tracker.residuals(z)

    try:
        res = least_squares(
            fun,
            z0,
            bounds=(lo, hi),
            method="trf",
            ftol=opts.tolerance,
            xtol=opts.xtol,
            gtol=1e-15,
            max_nfev=budget,
            diff_step=1e-7,
        )
    except _BudgetExhausted:
        return False
    return bool(res.status > 0)


def calibrate(
    surface: VolSurface,
    observed_ts: VarianceTermStructure | None,
    config: CalibrationConfig,
    settings: PricerSettings | None = None,
) -> CalibrationResult:
    """Minimize the joint objective starting from ``config.initial_guess``."""
    objective = SurfaceObjective.from_config(surface, observed_ts, config, settings)
    transform = ParamTransform(config.bounds)
    opts = config.optimizer
    tracker = _Tracker(objective, transform, opts.max_evaluations)
    lo, hi = transform.search_bounds()
    z0 = transform.to_search(config.initial_guess)
    tracker.value(z0)

    if opts.method == "nelder-mead":
        converged = _nelder_mead(tracker, z0, lo, hi, opts)
    elif opts.method == "least-squares":
        converged = _least_squares(tracker, z0, lo, hi, opts)
    else:
        converged = _least_squares(tracker, z0, lo, hi, opts)
        if tracker.best_z is not None and not tracker.exhausted:
            converged = _nelder_mead(tracker, tracker.best_z, lo, hi, opts) or converged

    if tracker.best_z is None or not math.isfinite(tracker.best_value):
        raise CalibrationError(f"no finite objective value found in {tracker.evaluations} evaluations")
    params = transform.from_search(tracker.best_z)
    b = objective.breakdown(params)
    mae = []
    vols, failed = objective.model_ivs(params)
    for j in range(len(objective.maturities)):
        s = slice(objective.bounds[j], objective.bounds[j + 1])
        err = np.where(failed[s], np.nan, np.abs(vols[s] - objective.market_iv[s]))
        mae.append(float(np.nanmean(err)) if np.any(~failed[s]) else math.nan)
    ts_err = np.abs(objective.ts_errors(params)).tolist() if observed_ts is not None else []
    return CalibrationResult(
        params=params,
        alpha=config.alpha,
        objective_value=b.total,
        iv_sse=b.iv_sse,
        ts_penalty=b.ts_penalty,
        iv_mae_by_maturity=tuple(mae),
        ts_error_by_maturity=tuple(ts_err),
        maturities=tuple(surface.maturities),
        converged=converged,
        evaluations=tracker.evaluations,
        iv_failures=b.iv_failures,
        message="converged" if converged else "evaluation budget exhausted or tolerance not met",
    )


def recovery_errors(fitted: BatesParams, truth: BatesParams) -> np.ndarray:
    """Componentwise error: relative, except absolute for rho and mu_j."""
    f, t = fitted.to_array(), truth.to_array()
    err = np.abs(f - t)
    rel = [i for i in range(8) if i not in (_RHO, _MU)]
    with np.errstate(divide="ignore", invalid="ignore"):
        err[rel] = np.where(t[rel] != 0, err[rel] / np.abs(t[rel]), err[rel])
    return err


def exactly_recovered(fitted: BatesParams, truth: BatesParams, tolerance: float = 1e-4) -> bool:
    return bool(np.max(recovery_errors(fitted, truth)) < tolerance)


# ---------------------------------------------------------------------------
# SJD reductions
# ---------------------------------------------------------------------------


def sjd_lambda_from_vs(vs_mkt: float, sigma: float) -> Callable[[float], float]:
    """lambda(J) = (VS_mkt - sigma^2) / J^2 along the variance-swap locus."""
    excess = vs_mkt - sigma * sigma
    if not excess > 0:
        raise NoJumpVarianceError(f"no jump variance: vs_mkt {vs_mkt} <= sigma^2 {sigma * sigma}")

    def rule(jump: float) -> float:
        if jump == 0:
            raise ZeroDivisionError("lambda(J) is singular at J = 0")
        return excess / (jump * jump)

    return rule


def sjd_lambda_from_vix(vix2_mkt: float, sigma: float) -> Callable[[float], float]:
    """lambda(J) = (VIX^2_mkt - sigma^2) / (2 (1 + J - e^J)) along the VIX locus."""
    excess = vix2_mkt - sigma * sigma

    def rule(jump: float) -> float:
        denom = 2.0 * (jump - math.expm1(jump))
        if denom == 0:
            raise ZeroDivisionError("lambda(J) is singular at J = 0")
        lam = -excess / denom
        if lam < 0:
            raise InconsistentVixError(
                f"inconsistent VIX level: vix2_mkt {vix2_mkt} below sigma^2 {sigma * sigma} needs negative lambda"
            )
        return lam

    return rule


def sjd_iv_sse(surface: VolSurface, sigma: float, lam: float, jump: float) -> float:
    """Equal-weight IV SSE of SJD prices against the surface."""
    params = SjdParams(sigma, lam, jump)
    total = 0.0
    for s in surface.slices:
        prices = np.where(
            s.is_call, sjd_price(params, surface.env, s.strikes, s.maturity, "call"),
            sjd_price(params, surface.env, s.strikes, s.maturity, "put"),
        )
        vols, status = implied_vols(surface.env, s.strikes, s.maturity, s.is_call, prices, guess=s.ivs)
        err = np.where(status != 0, 5.0, vols - s.ivs)
        total += float(err @ err)
    return total


@dataclass(frozen=True)
class SjdFit:
    lam: float
    jump: float
    objective: float
    converged: bool


def sjd_calibrate_univariate(
    surface: VolSurface,
    sigma: float,
    lambda_rule: Callable[[float], float],
    j_bracket=((-0.5, -1e-4), (1e-4, 0.5)),
    xatol: float = 1e-9,
) -> SjdFit:
    """Line search over J on the locus (lambda(J), J); keeps the better side."""
    if isinstance(j_bracket[0], (int, float)):
        j_bracket = (tuple(j_bracket),)

    def f(j):
        return sjd_iv_sse(surface, sigma, lambda_rule(j), j)

    best = None
    for lo, hi in j_bracket:
        if lo < 0 < hi:
            raise ValueError("each J bracket must exclude 0")
        # coarse scan picks the basin; bounded Brent refines it
        grid = np.linspace(lo, hi, 41)
        vals = np.array([f(j) for j in grid])
        k = int(np.argmin(vals))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
        res = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": xatol})
        j, val = (float(res.x), float(res.fun)) if res.fun <= vals[k] else (float(grid[k]), float(vals[k]))
        interior = lo < j < hi and 0 < k < grid.size - 1
        cand = SjdFit(lam=lambda_rule(j), jump=j, objective=val, converged=bool(res.success and interior))
        if best is None or cand.objective < best.objective:
            best = cand
    return best
